//! Individual-based approximation of the branching dynamics and its genealogy.
//!
//! Each unit of mass is `N` individuals. An individual branches at rate `bN`,
//! splitting in two with probability `(1 + a/(bN))/2` and dying otherwise. With
//! a site space every individual also migrates at rate 1 along `abar`.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::domain;
use crate::math::{exp, exp_m1, floor, ln, ln_1p, round};
use crate::rng::{exponential, open01};
use crate::spatial_sim::{AncestralPath, Mark, MarkKernel, MarkMode, MarkedUms, Site, SiteSpace};
use crate::umspace::{Builder, Forest, Ums, NONE};
use crate::{Error, Result};

pub const DEFAULT_CAP: usize = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GwConfig {
    /// Individuals per unit mass.
    pub n: u32,
    pub a: f64,
    pub b: f64,
    pub horizon: f64,
    /// Largest number of individual records before giving up.
    pub cap: usize,
}

impl GwConfig {
    pub fn new(n: u32, a: f64, b: f64, horizon: f64) -> Result<Self> {
        let c = GwConfig { n, a, b, horizon, cap: DEFAULT_CAP };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(domain!("N must be >= 1"));
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(domain!("b must be finite and > 0, got {}", self.b));
        }
        if !(self.a.is_finite() && self.a.abs() <= self.event_rate()) {
            return Err(domain!("need |a| <= bN, got a = {} with bN = {}", self.a, self.event_rate()));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(domain!("horizon must be finite and >= 0, got {}", self.horizon));
        }
        if self.cap == 0 {
            return Err(domain!("cap must be >= 1"));
        }
        Ok(())
    }

    pub fn event_rate(&self) -> f64 {
        self.b * self.n as f64
    }

    pub fn split_probability(&self) -> f64 {
        0.5 * (1.0 + self.a / self.event_rate())
    }

    pub fn birth_rate(&self) -> f64 {
        0.5 * (self.event_rate() + self.a)
    }

    pub fn death_rate(&self) -> f64 {
        0.5 * (self.event_rate() - self.a)
    }

    /// `F(s) = 1 + birth * (e^{as} - 1) / a`; `1/F(s)` is the tail of a node depth.
    pub fn depth_scale(&self, s: f64) -> f64 {
        let lb = self.birth_rate();
        if self.a == 0.0 {
            1.0 + lb * s
        } else {
            1.0 + lb * exp_m1(self.a * s) / self.a
        }
    }

    /// Probability that one individual has descendants alive after time `t`.
    pub fn survival_probability(&self, t: f64) -> f64 {
        (exp(self.a * t) / self.depth_scale(t)).min(1.0)
    }

    /// Node depth of the coalescent point process, `P(H > s) = 1/F(s)`.
    pub fn sample_depth<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let lb = self.birth_rate();
        if lb <= 0.0 {
            return f64::INFINITY;
        }
        let x = (1.0 / open01(rng) - 1.0) / lb;
        if self.a == 0.0 {
            return x;
        }
        let y = self.a * x;
        if 1.0 + y <= 0.0 {
            f64::INFINITY
        } else {
            ln_1p(y) / self.a
        }
    }

    /// Founders for an atom of mass `m`: `round(mN)`.
    pub fn founders(&self, m: f64) -> usize {
        round(m * self.n as f64) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle {
    /// `NONE` for founders.
    pub parent: u32,
    /// Index into [`Genealogy::origins`].
    pub origin: u32,
    pub birth: f64,
    /// `INFINITY` when alive at the horizon.
    pub death: f64,
    /// Site at birth.
    pub site: Site,
    /// First of two consecutive children, `NONE` if the individual died or is alive.
    pub children: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jump {
    pub particle: u32,
    pub time: f64,
    pub site: Site,
}

/// Full event record of one run. Founders are particles `0..founders`.
#[derive(Clone, Debug, PartialEq)]
pub struct Genealogy {
    pub config: GwConfig,
    pub initial: MarkedUms,
    /// `(initial leaf, atom index)` for every founder group.
    pub origins: Vec<(u32, u32)>,
    pub particles: Vec<Particle>,
    pub jumps: Vec<Jump>,
}

fn founder_mark(mode: MarkMode, m: &Mark) -> (Site, Mark) {
    match m {
        Mark::Site(s) => (*s, Mark::Path(AncestralPath::constant(*s))),
        Mark::Path(p) => {
            let now = mode.present();
            (p.value_at(now), Mark::Path(p.shifted(-now)))
        }
    }
}

fn resource(msg: &str, cap: usize) -> Error {
    Error::Resource(alloc::format!("{msg} exceeds the cap of {cap}"))
}

/// Forward simulation up to `cfg.horizon`.
pub(crate) fn simulate<R: Rng + ?Sized>(
    cfg: &GwConfig,
    init: &MarkedUms,
    space: Option<&SiteSpace>,
    rng: &mut R,
) -> Result<Genealogy> {
    cfg.validate()?;
    let mut particles: Vec<Particle> = Vec::new();
    let mut origins = Vec::new();
    let f = &init.forest;
    for id in f.leaf_ids() {
        for (ai, (m, w)) in f.leaf(id).expect("leaf").atoms().iter().enumerate() {
            let count = cfg.founders(*w);
            if count == 0 {
                continue;
            }
            let origin = origins.len() as u32;
            origins.push((id, ai as u32));
            let site = founder_mark(init.mode, m).0;
            if particles.len() + count > cfg.cap {
                return Err(resource("initial population", cfg.cap));
            }
            particles.extend((0..count).map(|_| Particle {
                parent: NONE,
                origin,
                birth: 0.0,
                death: f64::INFINITY,
                site,
                children: NONE,
            }));
        }
    }
    let mut alive: Vec<u32> = (0..particles.len() as u32).collect();
    let mut cur: Vec<Site> = particles.iter().map(|p| p.site).collect();
    let mut jumps = Vec::new();
    let bn = cfg.event_rate();
    let rho = space.map_or(0.0, |s| s.max_move_rate());
    let split = cfg.split_probability() * bn;
    let mut time = 0.0;
    while !alive.is_empty() {
        let k = alive.len();
        time += exponential(rng, k as f64 * (bn + rho));
        if time > cfg.horizon {
            break;
        }
        let idx = rng.random_range(0..k);
        let p = alive[idx];
        let x = rng.random::<f64>() * (bn + rho);
        if x < rho {
            let sp = space.expect("rho > 0 needs a space");
            let here = cur[p as usize];
            if x < sp.move_rate(here) {
                let to = sp.forward_destination(here, rng);
                cur[p as usize] = to;
                jumps.push(Jump { particle: p, time, site: to });
            }
            continue;
        }
        particles[p as usize].death = time;
        if x - rho < split {
            if particles.len() + 2 > cfg.cap {
                return Err(resource("number of individuals", cfg.cap));
            }
            let c = particles.len() as u32;
            let parent = particles[p as usize];
            particles[p as usize].children = c;
            let site = cur[p as usize];
            for _ in 0..2 {
                particles.push(Particle {
                    parent: p,
                    origin: parent.origin,
                    birth: time,
                    death: f64::INFINITY,
                    site,
                    children: NONE,
                });
                cur.push(site);
            }
            alive[idx] = c;
            alive.push(c + 1);
        } else {
            alive.swap_remove(idx);
        }
    }
    Ok(Genealogy { config: *cfg, initial: init.clone(), origins, particles, jumps })
}

pub fn simulate_gw<R: Rng + ?Sized>(cfg: &GwConfig, init: &Ums, rng: &mut R) -> Result<Genealogy> {
    simulate(cfg, &MarkedUms::at_site(init, 0), None, rng)
}

/// Initial tree with each leaf replaced by a node at height `t` over `groups[leaf]`;
/// initial merge heights and the ceiling move up by `t`.
fn assemble(
    initial: &Forest<MarkKernel>,
    t: f64,
    mut b: Builder<MarkKernel>,
    groups: &[Vec<u32>],
) -> Result<Forest<MarkKernel>> {
    let mut map = vec![NONE; initial.nodes().len()];
    for (i, n) in initial.nodes().iter().enumerate() {
        map[i] = if n.is_leaf() {
            b.join(t, &groups[i])
        } else {
            let kids: Vec<u32> = initial.children(i as u32).iter().map(|&c| map[c as usize]).collect();
            b.join(n.height + t, &kids)
        };
    }
    let roots: Vec<u32> = initial.roots().iter().map(|&r| map[r as usize]).collect();
    b.finish(&roots, initial.ceiling() + t)
}

impl Genealogy {
    pub fn founders(&self) -> usize {
        self.particles.iter().take_while(|p| p.parent == NONE).count()
    }

    pub fn horizon(&self) -> f64 {
        self.config.horizon
    }

    pub fn is_alive(&self, p: u32, t: f64) -> bool {
        let q = &self.particles[p as usize];
        q.birth <= t && t < q.death
    }

    pub fn alive_at(&self, t: f64) -> usize {
        (0..self.particles.len() as u32).filter(|&p| self.is_alive(p, t)).count()
    }

    pub fn mass_at(&self, t: f64) -> f64 {
        self.alive_at(t) as f64 / self.config.n as f64
    }

    fn jump_index(&self) -> (Vec<u32>, Vec<u32>) {
        let n = self.particles.len();
        let mut start = vec![0u32; n + 1];
        for j in &self.jumps {
            start[j.particle as usize + 1] += 1;
        }
        for i in 0..n {
            start[i + 1] += start[i];
        }
        let mut fill = start.clone();
        let mut order = vec![0u32; self.jumps.len()];
        for (k, j) in self.jumps.iter().enumerate() {
            let slot = &mut fill[j.particle as usize];
            order[*slot as usize] = k as u32;
            *slot += 1;
        }
        (start, order)
    }

    /// State at time `t <= horizon`: location marks, or raw paths with `now = t`.
    pub fn extract(&self, t: f64, paths: bool) -> Result<MarkedUms> {
        if !(t >= 0.0 && t <= self.config.horizon) {
            return Err(domain!("extraction time {t} outside [0, {}]", self.config.horizon));
        }
        let (start, order) = self.jump_index();
        let own = |p: u32| {
            order[start[p as usize] as usize..start[p as usize + 1] as usize].iter().map(|&k| &self.jumps[k as usize])
        };
        let inv_n = 1.0 / self.config.n as f64;
        let init = &self.initial.forest;
        let mut b = Builder::with_capacity(self.particles.len());
        let mut node = vec![NONE; self.particles.len()];
        let mut chain = Vec::new();
        for p in (0..self.particles.len() as u32).rev() {
            let q = &self.particles[p as usize];
            if q.birth > t {
                continue;
            }
            node[p as usize] = if t < q.death {
                let mark = if paths {
                    chain.clear();
                    let mut a = p;
                    while a != NONE {
                        chain.push(a);
                        a = self.particles[a as usize].parent;
                    }
                    let founder = *chain.last().expect("nonempty");
                    let (leaf, atom) = self.origins[self.particles[founder as usize].origin as usize];
                    let m = &init.leaf(leaf).expect("leaf").atoms()[atom as usize].0;
                    let Mark::Path(mut path) = founder_mark(self.initial.mode, m).1 else { unreachable!() };
                    for &a in chain.iter().rev() {
                        for j in own(a).filter(|j| j.time <= t) {
                            path.push(j.time, j.site);
                        }
                    }
                    Mark::Path(path)
                } else {
                    Mark::Site(own(p).take_while(|j| j.time <= t).last().map_or(q.site, |j| j.site))
                };
                b.leaf(MarkKernel::atom(mark, inv_n))
            } else if q.children != NONE {
                let c = q.children as usize;
                let kids: Vec<u32> = [node[c], node[c + 1]].into_iter().filter(|&x| x != NONE).collect();
                match kids.len() {
                    0 => NONE,
                    1 => kids[0],
                    _ => b.join(t - q.death, &kids),
                }
            } else {
                NONE
            };
        }
        let mut groups = vec![Vec::new(); init.nodes().len()];
        for (p, q) in self.particles.iter().enumerate().take_while(|(_, q)| q.parent == NONE) {
            if node[p] != NONE {
                groups[self.origins[q.origin as usize].0 as usize].push(node[p]);
            }
        }
        let forest = assemble(init, t, b, &groups)?;
        let mode = if paths { MarkMode::RawPath { now: t } } else { MarkMode::Location };
        Ok(MarkedUms { forest, mode })
    }

    /// Unmarked genealogy at time `t`.
    pub fn extract_ums(&self, t: f64) -> Result<Ums> {
        Ok(self.extract(t, false)?.unmarked())
    }

    /// Total mass at each of the given times.
    pub fn total_mass_path(&self, times: &[f64]) -> Vec<f64> {
        let mut ev: Vec<(f64, i64)> = Vec::with_capacity(2 * self.particles.len());
        let mut base = 0i64;
        for q in &self.particles {
            if q.parent == NONE {
                base += 1;
            } else {
                ev.push((q.birth, 1));
            }
            if q.death.is_finite() {
                ev.push((q.death, -1));
            }
        }
        ev.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut idx: Vec<usize> = (0..times.len()).collect();
        idx.sort_by(|&i, &j| times[i].total_cmp(&times[j]));
        let mut out = vec![0.0; times.len()];
        let mut k = 0;
        let mut count = base;
        for i in idx {
            while k < ev.len() && ev[k].0 <= times[i] {
                count += ev[k].1;
                k += 1;
            }
            out[i] = count as f64 / self.config.n as f64;
        }
        out
    }
}

pub fn extract_ums(g: &Genealogy, t: f64) -> Result<Ums> {
    g.extract_ums(t)
}

pub fn total_mass_path(g: &Genealogy, times: &[f64]) -> Vec<f64> {
    g.total_mass_path(times)
}

/// Number of failures before the next success of a Bernoulli(`q`) sequence.
fn geometric_skip<R: Rng + ?Sized>(q: f64, rng: &mut R) -> usize {
    if q >= 1.0 {
        return 0;
    }
    if q <= 0.0 {
        return usize::MAX;
    }
    let g = floor(ln(open01(rng)) / ln_1p(-q));
    if g >= usize::MAX as f64 {
        usize::MAX
    } else {
        g as usize
    }
}

struct Shape {
    height: f64,
    left: u32,
    right: u32,
    parent: u32,
}

/// Reconstructed tree of one surviving founder: node depths are i.i.d. until one reaches `t`.
fn family_shape<R: Rng + ?Sized>(cfg: &GwConfig, t: f64, cap: usize, rng: &mut R, out: &mut Vec<Shape>) -> Result<u32> {
    out.clear();
    let leaf = |out: &mut Vec<Shape>| {
        out.push(Shape { height: 0.0, left: NONE, right: NONE, parent: NONE });
        (out.len() - 1) as u32
    };
    let join = |out: &mut Vec<Shape>, h: f64, l: u32, r: u32| {
        out.push(Shape { height: h, left: l, right: r, parent: NONE });
        let id = (out.len() - 1) as u32;
        out[l as usize].parent = id;
        out[r as usize].parent = id;
        id
    };
    let mut stack: Vec<(u32, f64)> = Vec::new();
    let mut cur = leaf(out);
    loop {
        let h = cfg.sample_depth(rng);
        if h >= t {
            break;
        }
        while let Some(&(l, hs)) = stack.last() {
            if hs >= h {
                break;
            }
            stack.pop();
            cur = join(out, hs, l, cur);
        }
        stack.push((cur, h));
        if out.len() > 2 * cap {
            return Err(resource("family size", cap));
        }
        cur = leaf(out);
    }
    while let Some((l, hs)) = stack.pop() {
        cur = join(out, hs, l, cur);
    }
    Ok(cur)
}

/// Exact draw of the state at time `t` without simulating extinct lineages.
///
/// Surviving founders are Bernoulli thinned; each survivor's reconstructed tree is
/// a coalescent point process. Marks follow the tree top-down with independent
/// migration walks along its edges.
pub fn sample_marked<R: Rng + ?Sized>(
    cfg: &GwConfig,
    init: &MarkedUms,
    space: Option<&SiteSpace>,
    t: f64,
    paths: bool,
    rng: &mut R,
) -> Result<MarkedUms> {
    cfg.validate()?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(domain!("time must be finite and >= 0, got {t}"));
    }
    if !paths && init.mode.is_path() {
        return Err(Error::Mode("path initial marks need path output".to_string()));
    }
    if let Some(s) = space {
        init.check_sites(s)?;
    }
    let inv_n = 1.0 / cfg.n as f64;
    let q = cfg.survival_probability(t);
    let moving = space.filter(|s| s.max_move_rate() > 0.0);
    let f = &init.forest;
    let mut b = Builder::new();
    let mut groups = vec![Vec::new(); f.nodes().len()];
    let mut shape = Vec::new();
    let mut sites: Vec<Site> = Vec::new();
    let mut edges: Vec<Vec<(f64, Site)>> = Vec::new();
    let mut ids: Vec<u32> = Vec::new();
    let mut leaves = 0usize;
    for id in f.leaf_ids() {
        for (m, w) in f.leaf(id).expect("leaf").atoms() {
            let count = cfg.founders(*w);
            let (site0, pmark) = founder_mark(init.mode, m);
            let Mark::Path(path0) = pmark else { unreachable!() };
            let mut i = geometric_skip(q, rng);
            while i < count {
                let root = family_shape(cfg, t, cfg.cap, rng, &mut shape)?;
                leaves += shape.len().div_ceil(2);
                if leaves > cfg.cap {
                    return Err(resource("number of individuals", cfg.cap));
                }
                sites.clear();
                sites.resize(shape.len(), site0);
                edges.iter_mut().for_each(|e| e.clear());
                if paths && edges.len() < shape.len() {
                    edges.resize(shape.len(), Vec::new());
                }
                if let Some(sp) = moving {
                    for k in (0..shape.len()).rev() {
                        let s = &shape[k];
                        let (from, t0) = if s.parent == NONE {
                            (site0, 0.0)
                        } else {
                            (sites[s.parent as usize], t - shape[s.parent as usize].height)
                        };
                        let rec = if paths { Some(&mut edges[k]) } else { None };
                        sites[k] = sp.walk(from, t0, t - s.height, rng, rec);
                    }
                }
                ids.clear();
                for k in 0..shape.len() {
                    let s = &shape[k];
                    let nid = if s.left == NONE {
                        let mark = if paths {
                            let mut chain = Vec::new();
                            let mut a = k as u32;
                            while a != NONE {
                                chain.push(a);
                                a = shape[a as usize].parent;
                            }
                            let mut p = path0.clone();
                            for &a in chain.iter().rev() {
                                for &(tj, sj) in &edges[a as usize] {
                                    p.push(tj, sj);
                                }
                            }
                            Mark::Path(p)
                        } else {
                            Mark::Site(sites[k])
                        };
                        b.leaf(MarkKernel::atom(mark, inv_n))
                    } else {
                        b.join(s.height, &[ids[s.left as usize], ids[s.right as usize]])
                    };
                    ids.push(nid);
                }
                groups[id as usize].push(ids[root as usize]);
                i = i.saturating_add(1).saturating_add(geometric_skip(q, rng));
            }
        }
    }
    let forest = assemble(f, t, b, &groups)?;
    let mode = if paths { MarkMode::RawPath { now: t } } else { MarkMode::Location };
    Ok(MarkedUms { forest, mode })
}

/// Total mass at time `t` from initial mass `m0`, drawn from the exact marginal:
/// surviving founders are thinned with probability `q(t)` and each surviving
/// family has a geometric size with mean `F(t)`.
pub fn sample_mass<R: Rng + ?Sized>(cfg: &GwConfig, m0: f64, t: f64, rng: &mut R) -> Result<f64> {
    cfg.validate()?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(domain!("time must be finite and >= 0, got {t}"));
    }
    let count = cfg.founders(m0);
    let q = cfg.survival_probability(t);
    let stop = 1.0 / cfg.depth_scale(t);
    let mut total = 0usize;
    let mut i = geometric_skip(q, rng);
    while i < count {
        total = total.saturating_add(1).saturating_add(geometric_skip(stop, rng));
        if total > cfg.cap {
            return Err(resource("number of individuals", cfg.cap));
        }
        i = i.saturating_add(1).saturating_add(geometric_skip(q, rng));
    }
    Ok(total as f64 / cfg.n as f64)
}

/// Unmarked state at time `t` drawn with the reduced sampler.
pub fn sample_population<R: Rng + ?Sized>(cfg: &GwConfig, init: &Ums, t: f64, rng: &mut R) -> Result<Ums> {
    Ok(sample_marked(cfg, &MarkedUms::at_site(init, 0), None, t, false, rng)?.unmarked())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::replicate_rng;
    use crate::stats::Moments;

    #[test]
    fn depth_tail() {
        let cfg = GwConfig::new(10, 0.7, 1.0, 1.0).unwrap();
        let mut rng = replicate_rng(3, 0);
        let s = 0.05;
        let n = 200_000;
        let hits = (0..n).filter(|_| cfg.sample_depth(&mut rng) > s).count() as f64 / n as f64;
        let p = 1.0 / cfg.depth_scale(s);
        assert!((hits - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt(), "{hits} vs {p}");
    }

    #[test]
    fn full_sim_mass_mean() {
        let cfg = GwConfig::new(20, 1.0, 1.0, 0.5).unwrap();
        let init = Ums::singleton(1.0);
        let mut m = Moments::new();
        for i in 0..2000 {
            let g = simulate_gw(&cfg, &init, &mut replicate_rng(11, i)).unwrap();
            m.push(g.mass_at(0.5));
        }
        let target = 0.5f64.exp();
        assert!((m.mean() - target).abs() < 4.0 * m.se(), "{} vs {target}", m.mean());
    }

    #[test]
    fn extract_mass_and_heights() {
        let cfg = GwConfig::new(50, 0.0, 1.0, 0.4).unwrap();
        let init = Ums::from_trees(
            0.0,
            vec![crate::umspace::Tree::node(
                0.2,
                vec![crate::umspace::Tree::Leaf(0.5), crate::umspace::Tree::Leaf(0.5)],
            )],
        )
        .unwrap();
        let g = simulate_gw(&cfg, &init, &mut replicate_rng(5, 0)).unwrap();
        let u = g.extract_ums(0.3).unwrap();
        assert!((u.total_mass() - g.mass_at(0.3)).abs() < 1e-12);
        assert!(u.diameter() <= 2.0 * (0.2 + 0.3) + 1e-12);
        let u0 = g.extract_ums(0.0).unwrap();
        assert!(u0.is_isomorphic(&init));
        let path = g.total_mass_path(&[0.0, 0.3, 0.1]);
        assert!((path[1] - g.mass_at(0.3)).abs() < 1e-12 && (path[2] - g.mass_at(0.1)).abs() < 1e-12);
    }

    #[test]
    fn reduced_sampler_mass_mean() {
        let cfg = GwConfig::new(500, -0.5, 1.0, 1.0).unwrap();
        let init = Ums::singleton(2.0);
        let mut m = Moments::new();
        for i in 0..4000 {
            m.push(sample_population(&cfg, &init, 1.0, &mut replicate_rng(2, i)).unwrap().total_mass());
        }
        let target = 2.0 * (-0.5f64).exp();
        assert!((m.mean() - target).abs() < 4.0 * m.se(), "{} vs {target}", m.mean());
    }

    #[test]
    fn mass_sampler_moments() {
        let cfg = GwConfig::new(200, 0.5, 1.0, 1.0).unwrap();
        let mut m = Moments::new();
        for i in 0..20_000 {
            m.push(sample_mass(&cfg, 1.0, 1.0, &mut replicate_rng(21, i)).unwrap());
        }
        let (e1, e2) = (exp(0.5), exp(1.0));
        assert!((m.mean() - e1).abs() < 4.0 * m.se(), "{} vs {e1}", m.mean());
        let v = m.variance_estimate();
        assert!((v.value - (e2 - e1) / 0.5).abs() < 4.0 * v.se, "{} vs {}", v.value, (e2 - e1) / 0.5);
    }

    #[test]
    fn cap_is_enforced() {
        let mut cfg = GwConfig::new(100, 0.0, 1.0, 1.0).unwrap();
        cfg.cap = 50;
        let err = simulate_gw(&cfg, &Ums::singleton(1.0), &mut replicate_rng(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
    }
}
