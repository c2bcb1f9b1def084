//! JSON and CSV formats.
//!
//! Spaces are `{ceiling, trees: [node]}` with `node = {h, children}` or a leaf.
//! Unmarked leaves are `{mass}`; marked leaves are `{atoms: [{mass, mark}]}`
//! where `mark` is a site index or `{times, sites}` (one more site than times).

use std::path::Path;

use anyhow::{bail, Context, Result};
use genealogy_core::coalescent_dual::FkConvention;
use genealogy_core::feller_sim::Genealogy;
use genealogy_core::polynomials::{Chi, Phi, PhiSpec};
use genealogy_core::spatial_sim::{AncestralPath, Mark, MarkKernel, MarkMode, MarkedUms};
use genealogy_core::umspace::{Forest, LeafData, Tree, NONE};
use genealogy_core::Ums;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(untagged)]
pub enum NodeJson<L> {
    Internal { h: f64, children: Vec<NodeJson<L>> },
    Leaf(L),
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MassJson {
    pub mass: f64,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(untagged)]
pub enum MarkJson {
    Site(u32),
    Path { times: Vec<f64>, sites: Vec<u32> },
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AtomJson {
    pub mass: f64,
    pub mark: MarkJson,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AtomsJson {
    pub atoms: Vec<AtomJson>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct UmsJson {
    pub ceiling: f64,
    pub trees: Vec<NodeJson<MassJson>>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ModeJson {
    Location,
    RawPath { now: f64 },
    AdjustedPath,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct MarkedUmsJson {
    pub mode: ModeJson,
    pub ceiling: f64,
    pub trees: Vec<NodeJson<AtomsJson>>,
}

fn node_to_json<L, J>(t: Tree<L>, leaf: &impl Fn(L) -> J) -> NodeJson<J> {
    match t {
        Tree::Leaf(l) => NodeJson::Leaf(leaf(l)),
        Tree::Node(h, cs) => {
            NodeJson::Internal { h, children: cs.into_iter().map(|c| node_to_json(c, leaf)).collect() }
        }
    }
}

fn node_from_json<L, J>(n: NodeJson<J>, leaf: &impl Fn(J) -> Result<L>) -> Result<Tree<L>> {
    Ok(match n {
        NodeJson::Leaf(j) => Tree::Leaf(leaf(j)?),
        NodeJson::Internal { h, children } => {
            Tree::Node(h, children.into_iter().map(|c| node_from_json(c, leaf)).collect::<Result<_>>()?)
        }
    })
}

pub fn ums_to_json(u: &Ums) -> UmsJson {
    let (ceiling, trees) = u.to_trees();
    UmsJson { ceiling, trees: trees.into_iter().map(|t| node_to_json(t, &|mass| MassJson { mass })).collect() }
}

pub fn ums_from_json(j: UmsJson) -> Result<Ums> {
    let trees = j.trees.into_iter().map(|t| node_from_json(t, &|m: MassJson| Ok(m.mass))).collect::<Result<_>>()?;
    Ok(Forest::from_trees(j.ceiling, trees)?)
}

fn mark_to_json(m: &Mark) -> MarkJson {
    match m {
        Mark::Site(s) => MarkJson::Site(*s),
        Mark::Path(p) => {
            let mut sites = vec![p.start()];
            sites.extend(p.jumps().iter().map(|j| j.1));
            MarkJson::Path { times: p.jumps().iter().map(|j| j.0).collect(), sites }
        }
    }
}

fn mark_from_json(m: MarkJson) -> Result<Mark> {
    Ok(match m {
        MarkJson::Site(s) => Mark::Site(s),
        MarkJson::Path { times, sites } => {
            if sites.len() != times.len() + 1 {
                bail!("a path needs exactly one more site than jump times");
            }
            Mark::Path(AncestralPath::new(sites[0], times.into_iter().zip(sites[1..].iter().copied()).collect())?)
        }
    })
}

pub fn marked_to_json(u: &MarkedUms) -> MarkedUmsJson {
    let (ceiling, trees) = u.forest.to_trees();
    let leaf = |k: MarkKernel| AtomsJson {
        atoms: k.atoms().iter().map(|(m, w)| AtomJson { mass: *w, mark: mark_to_json(m) }).collect(),
    };
    let mode = match u.mode {
        MarkMode::Location => ModeJson::Location,
        MarkMode::RawPath { now } => ModeJson::RawPath { now },
        MarkMode::AdjustedPath => ModeJson::AdjustedPath,
    };
    MarkedUmsJson { mode, ceiling, trees: trees.into_iter().map(|t| node_to_json(t, &leaf)).collect() }
}

pub fn marked_from_json(j: MarkedUmsJson) -> Result<MarkedUms> {
    let leaf = |a: AtomsJson| -> Result<MarkKernel> {
        let atoms = a.atoms.into_iter().map(|x| Ok((mark_from_json(x.mark)?, x.mass))).collect::<Result<Vec<_>>>()?;
        Ok(MarkKernel::from_atoms(atoms))
    };
    let trees = j.trees.into_iter().map(|t| node_from_json(t, &leaf)).collect::<Result<_>>()?;
    let mode = match j.mode {
        ModeJson::Location => MarkMode::Location,
        ModeJson::RawPath { now } => MarkMode::RawPath { now },
        ModeJson::AdjustedPath => MarkMode::AdjustedPath,
    };
    Ok(MarkedUms::new(Forest::from_trees(j.ceiling, trees)?, mode)?)
}

/// Either format: a marked document has a `mode` field.
pub fn state_from_value(v: Value) -> Result<MarkedUms> {
    if v.get("mode").is_some() {
        marked_from_json(serde_json::from_value(v)?)
    } else {
        Ok(MarkedUms::at_site(&ums_from_json(serde_json::from_value(v)?)?, 0))
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ChiJson {
    One,
    Sites(Vec<u32>),
    PathEval(Vec<Vec<(f64, u32)>>),
    PathOccupation(Vec<Vec<(u32, f64, f64)>>),
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpecJson {
    pub n: usize,
    pub phi: String,
    pub params: Vec<f64>,
    #[serde(default = "chi_one")]
    pub chi: ChiJson,
}

fn chi_one() -> ChiJson {
    ChiJson::One
}

impl SpecJson {
    pub fn from_spec(s: &PhiSpec) -> Self {
        let chi = match &s.chi {
            Chi::One => ChiJson::One,
            Chi::Sites(v) => ChiJson::Sites(v.clone()),
            Chi::PathEval(v) => ChiJson::PathEval(v.clone()),
            Chi::PathOccupation(v) => ChiJson::PathOccupation(v.clone()),
        };
        SpecJson { n: s.n, phi: s.phi.id().into(), params: s.phi.params(), chi }
    }

    pub fn to_spec(&self) -> Result<PhiSpec> {
        let chi = match &self.chi {
            ChiJson::One => Chi::One,
            ChiJson::Sites(v) => Chi::Sites(v.clone()),
            ChiJson::PathEval(v) => Chi::PathEval(v.clone()),
            ChiJson::PathOccupation(v) => Chi::PathOccupation(v.clone()),
        };
        Ok(PhiSpec::marked(self.n, Phi::from_id(&self.phi, &self.params)?, chi)?)
    }
}

pub fn convention_from_str(s: &str) -> Result<FkConvention> {
    match s {
        "scaled" => Ok(FkConvention::Scaled),
        "unscaled" => Ok(FkConvention::Unscaled),
        _ => bail!("unknown Feynman-Kac convention `{s}` (scaled | unscaled)"),
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ParticleJson {
    pub id: u32,
    pub parent: Option<u32>,
    pub origin: u32,
    pub birth: f64,
    pub death: Option<f64>,
    pub site: u32,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct JumpJson {
    pub particle: u32,
    pub time: f64,
    pub site: u32,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct GenealogyJson {
    pub n: u32,
    pub a: f64,
    pub b: f64,
    pub horizon: f64,
    pub initial: MarkedUmsJson,
    pub origins: Vec<(u32, u32)>,
    pub particles: Vec<ParticleJson>,
    pub jumps: Vec<JumpJson>,
}

pub fn genealogy_to_json(g: &Genealogy) -> GenealogyJson {
    GenealogyJson {
        n: g.config.n,
        a: g.config.a,
        b: g.config.b,
        horizon: g.config.horizon,
        initial: marked_to_json(&g.initial),
        origins: g.origins.clone(),
        particles: g
            .particles
            .iter()
            .enumerate()
            .map(|(i, p)| ParticleJson {
                id: i as u32,
                parent: (p.parent != NONE).then_some(p.parent),
                origin: p.origin,
                birth: p.birth,
                death: p.death.is_finite().then_some(p.death),
                site: p.site,
            })
            .collect(),
        jumps: g.jumps.iter().map(|j| JumpJson { particle: j.particle, time: j.time, site: j.site }).collect(),
    }
}

/// Parse JSON without the default nesting limit (trees can be deep).
pub fn from_str_deep<T: DeserializeOwned>(s: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(s);
    de.disable_recursion_limit();
    let v = T::deserialize(&mut de)?;
    de.end()?;
    Ok(v)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    from_str_deep(&s).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Dense numeric series as CSV with a header row.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn leaf_masses(u: &MarkedUms) -> Vec<f64> {
    u.forest.leaf_ids().map(|id| u.forest.leaf(id).map_or(0.0, |k| k.mass())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ums_round_trip_bit_exact() {
        let u = Ums::from_trees(
            0.7,
            vec![Tree::node(0.1 + 0.2, vec![Tree::Leaf(1.0 / 3.0), Tree::Leaf(2.0)]), Tree::Leaf(std::f64::consts::PI)],
        )
        .unwrap();
        let s = serde_json::to_string(&ums_to_json(&u)).unwrap();
        let back = ums_from_json(from_str_deep(&s).unwrap()).unwrap();
        assert_eq!(u, back);
    }

    #[test]
    fn marked_round_trip() {
        let p = AncestralPath::new(1, vec![(-0.25, 0), (-0.125, 2)]).unwrap();
        let k = MarkKernel::from_atoms([(Mark::Path(p), 0.5), (Mark::Path(AncestralPath::constant(0)), 1.5)]);
        let f = Forest::from_trees(
            0.0,
            vec![Tree::node(
                0.3,
                vec![Tree::Leaf(k), Tree::Leaf(MarkKernel::atom(Mark::Path(AncestralPath::constant(2)), 1.0))],
            )],
        )
        .unwrap();
        let u = MarkedUms::new(f, MarkMode::AdjustedPath).unwrap();
        let s = serde_json::to_string(&marked_to_json(&u)).unwrap();
        let back = marked_from_json(from_str_deep(&s).unwrap()).unwrap();
        assert_eq!(u, back);
    }

    #[test]
    fn deep_tree_parses() {
        let mut t = Tree::Leaf(1.0);
        for i in 1..3000 {
            t = Tree::node(i as f64, vec![t, Tree::Leaf(1.0)]);
        }
        let u = Ums::from_trees(0.0, vec![t]).unwrap();
        let s = std::thread::Builder::new()
            .stack_size(256 << 20)
            .spawn(move || {
                let s = serde_json::to_string(&ums_to_json(&u)).unwrap();
                let back = ums_from_json(from_str_deep(&s).unwrap()).unwrap();
                assert_eq!(back, u);
                s.len()
            })
            .unwrap()
            .join()
            .unwrap();
        assert!(s > 0);
    }
}
