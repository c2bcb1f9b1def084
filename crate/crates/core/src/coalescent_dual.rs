//! Coalescent duals with Feynman-Kac weights.
//!
//! Elements `0..n` are grouped into blocks. Active blocks merge at rate `b`
//! (only when they share a site in the spatial version) and migrate with the
//! kernel `a`. Distances between elements of different blocks grow at rate
//! `active_i + active_j`. The weight `exp(beta)` integrates the potential
//! `kappa * sum_xi C(#blocks at xi, 2) + a * #blocks` over active blocks.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::domain;
use crate::feller_sim::{sample_marked, GwConfig};
use crate::math::exp;
use crate::polynomials::{Chi, Evaluator, PhiSpec, Window};
use crate::rng::{exponential, replicate_rng};
use crate::spatial_sim::{AncestralPath, Mark, MarkedUms, Site, SiteSpace};
use crate::stats::{effective_sample_size, z_score, Estimate, Moments};
use crate::umspace::{pair_index, DistanceMatrix, Ums};
use crate::{Error, Result};

/// Rate of the pair term in the Feynman-Kac exponent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FkConvention {
    /// `b * C(#p, 2)`
    #[default]
    Scaled,
    /// `C(#p, 2)`
    Unscaled,
}

impl FkConvention {
    pub fn pair_rate(&self, b: f64) -> f64 {
        match self {
            FkConvention::Scaled => b,
            FkConvention::Unscaled => 1.0,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            FkConvention::Scaled => "scaled",
            FkConvention::Unscaled => "unscaled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualConfig {
    pub a: f64,
    pub b: f64,
    pub convention: FkConvention,
}

impl DualConfig {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite()) || !a.is_finite() {
            return Err(domain!("need finite a and b > 0, got a = {a}, b = {b}"));
        }
        Ok(DualConfig { a, b, convention: FkConvention::Scaled })
    }

    fn potential(&self, pairs: usize, blocks: usize) -> f64 {
        self.convention.pair_rate(self.b) * pairs as f64 + self.a * blocks as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoalescentState {
    /// Elapsed dual time.
    pub s: f64,
    /// Block label per element: the smallest element of its block.
    pub block: Vec<u32>,
    pub r: DistanceMatrix,
    /// Site per element (spatial version).
    pub sites: Option<Vec<Site>>,
    /// Backward path per element, indexed by dual time.
    pub paths: Option<Vec<AncestralPath>>,
    pub beta: f64,
    /// Dual time at which each element becomes active.
    pub activation: Vec<f64>,
}

impl CoalescentState {
    /// `n` singleton blocks, all active at time 0.
    pub fn new(n: usize) -> Self {
        CoalescentState {
            s: 0.0,
            block: (0..n as u32).collect(),
            r: DistanceMatrix::zeros(n),
            sites: None,
            paths: None,
            beta: 0.0,
            activation: vec![0.0; n],
        }
    }

    pub fn spatial(sites: Vec<Site>) -> Self {
        let mut c = Self::new(sites.len());
        c.paths = Some(sites.iter().map(|&x| AncestralPath::constant(x)).collect());
        c.sites = Some(sites);
        c
    }

    /// Element `i` joins the dynamics at dual time `activation[i]`.
    pub fn with_activation(mut self, activation: Vec<f64>) -> Result<Self> {
        if activation.len() != self.n() || activation.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(domain!("need one finite activation time >= 0 per element"));
        }
        self.activation = activation;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.block.len()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.activation[i] <= self.s
    }

    /// Blocks ordered by smallest element.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        let mut idx = vec![usize::MAX; self.n()];
        for i in 0..self.n() {
            let l = self.block[i] as usize;
            if idx[l] == usize::MAX {
                idx[l] = out.len();
                out.push(Vec::new());
            }
            out[idx[l]].push(i);
        }
        out
    }

    pub fn block_count(&self) -> usize {
        (0..self.n()).filter(|&i| self.block[i] as usize == i).count()
    }

    pub fn weight(&self) -> f64 {
        exp(self.beta)
    }

    fn site(&self, i: usize) -> Site {
        self.sites.as_ref().map_or(0, |s| s[i])
    }

    fn active_blocks(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.block[i] as usize == i && self.is_active(i)).collect()
    }

    fn pairs_among(&self, act: &[usize]) -> usize {
        let mut p = 0;
        for (x, &i) in act.iter().enumerate() {
            p += act[x + 1..].iter().filter(|&&j| self.site(i) == self.site(j)).count();
        }
        p
    }

    fn advance(&mut self, dt: f64, cfg: &DualConfig) {
        if dt <= 0.0 {
            return;
        }
        let act = self.active_blocks();
        self.beta += dt * cfg.potential(self.pairs_among(&act), act.len());
        for i in 0..self.n() {
            for j in i + 1..self.n() {
                if self.block[i] != self.block[j] {
                    let rate = self.is_active(i) as u8 as f64 + self.is_active(j) as u8 as f64;
                    self.r.set(i, j, self.r.get(i, j) + rate * dt);
                }
            }
        }
        self.s += dt;
    }

    fn merge(&mut self, x: usize, y: usize) {
        let (keep, gone) = (x.min(y) as u32, x.max(y) as u32);
        for l in self.block.iter_mut() {
            if *l == gone {
                *l = keep;
            }
        }
    }

    fn relocate(&mut self, label: usize, to: Site) {
        let s = self.s;
        for i in 0..self.n() {
            if self.block[i] as usize == label {
                if let Some(sites) = self.sites.as_mut() {
                    sites[i] = to;
                }
                if let Some(paths) = self.paths.as_mut() {
                    paths[i].push(s, to);
                }
            }
        }
    }

    /// Site of element `i` at dual time `s`.
    pub fn site_at(&self, i: usize, s: f64) -> Option<Site> {
        self.paths.as_ref().map(|p| p[i].value_at(s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Initial state, the state after every event, and the final state.
    pub states: Vec<CoalescentState>,
}

impl Trajectory {
    pub fn last(&self) -> &CoalescentState {
        self.states.last().expect("a trajectory is never empty")
    }

    /// `beta` accumulated over `[s0, s1]`, recomputed from the recorded states.
    pub fn beta_between(&self, s0: f64, s1: f64, cfg: &DualConfig) -> f64 {
        let mut total = 0.0;
        for w in self.states.windows(2) {
            let (a, b) = (w[0].s.max(s0), w[1].s.min(s1));
            if b > a {
                let mut probe = w[0].clone();
                probe.s = a;
                let act = probe.active_blocks();
                total += (b - a) * cfg.potential(probe.pairs_among(&act), act.len());
            }
        }
        total
    }
}

/// Continue `state` until dual time `until`.
pub fn run<R: Rng + ?Sized>(
    cfg: &DualConfig,
    space: Option<&SiteSpace>,
    mut st: CoalescentState,
    until: f64,
    rng: &mut R,
    mut record: Option<&mut Vec<CoalescentState>>,
) -> CoalescentState {
    loop {
        let act = st.active_blocks();
        let pairs = st.pairs_among(&act);
        let merge_rate = cfg.b * pairs as f64;
        let moves: Vec<f64> = match space {
            Some(sp) => act.iter().map(|&i| sp.dual_move_rate(st.site(i))).collect(),
            None => Vec::new(),
        };
        let total = merge_rate + moves.iter().sum::<f64>();
        let next_activation = st.activation.iter().copied().filter(|&x| x > st.s).fold(f64::INFINITY, f64::min);
        let stop = until.min(next_activation);
        let dt = if total > 0.0 { exponential(rng, total) } else { f64::INFINITY };
        if st.s + dt >= stop {
            st.advance(stop - st.s, cfg);
            st.s = stop;
            if stop >= until {
                break;
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.push(st.clone());
            }
            continue;
        }
        st.advance(dt, cfg);
        let u = rng.random::<f64>() * total;
        if u < merge_rate {
            let k = ((u / cfg.b) as usize).min(pairs - 1);
            let mut seen = 0;
            'outer: for (x, &i) in act.iter().enumerate() {
                for &j in &act[x + 1..] {
                    if st.site(i) == st.site(j) {
                        if seen == k {
                            st.merge(i, j);
                            break 'outer;
                        }
                        seen += 1;
                    }
                }
            }
        } else {
            let sp = space.expect("moves need a space");
            let mut v = u - merge_rate;
            let mut pick = act.len() - 1;
            for (x, &m) in moves.iter().enumerate() {
                if v < m {
                    pick = x;
                    break;
                }
                v -= m;
            }
            let i = act[pick];
            let to = sp.dual_destination(st.site(i), rng);
            st.relocate(i, to);
        }
        if let Some(rec) = record.as_deref_mut() {
            rec.push(st.clone());
        }
    }
    st
}

fn trajectory<R: Rng + ?Sized>(
    cfg: &DualConfig,
    space: Option<&SiteSpace>,
    st: CoalescentState,
    horizon: f64,
    rng: &mut R,
) -> Trajectory {
    let mut states = vec![st.clone()];
    let end = run(cfg, space, st, horizon, rng, Some(&mut states));
    states.push(end);
    Trajectory { states }
}

/// Kingman coalescent with growing distances, started from `n` singletons.
pub fn simulate_kingman<R: Rng + ?Sized>(n: usize, cfg: &DualConfig, horizon: f64, rng: &mut R) -> Trajectory {
    trajectory(cfg, None, CoalescentState::new(n), horizon, rng)
}

/// Spatial coalescent: blocks migrate with `a` and merge at rate `b` when co-located.
pub fn simulate_spatial_coalescent<R: Rng + ?Sized>(
    sites: Vec<Site>,
    space: &SiteSpace,
    cfg: &DualConfig,
    horizon: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if let Some(&s) = sites.iter().find(|&&s| s as usize >= space.sites()) {
        return Err(domain!("site {s} outside a space of {} sites", space.sites()));
    }
    Ok(trajectory(cfg, Some(space), CoalescentState::spatial(sites), horizon, rng))
}

/// Time-space variant: element `i` stays frozen until dual time `activation[i]`.
pub fn simulate_time_space<R: Rng + ?Sized>(
    activation: Vec<f64>,
    sites: Option<(Vec<Site>, &SiteSpace)>,
    cfg: &DualConfig,
    horizon: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let (st, space) = match sites {
        Some((s, sp)) => (CoalescentState::spatial(s), Some(sp)),
        None => (CoalescentState::new(activation.len()), None),
    };
    Ok(trajectory(cfg, space, st.with_activation(activation)?, horizon, rng))
}

/// `H(u0, c)`: one sample per block from `u0` (from the block's site when spatial),
/// `phi(r^p + r')` times the window, times the path checks of `chi`.
pub fn duality_pairing(
    u0: &MarkedUms,
    c: &CoalescentState,
    spec: &PhiSpec,
    window: Window,
    ev: &Evaluator,
) -> Result<Estimate> {
    if spec.n != c.n() {
        return Err(domain!("polynomial degree {} does not match {} dual elements", spec.n, c.n()));
    }
    let mut factor = 1.0;
    match &spec.chi {
        Chi::One | Chi::Sites(_) => {}
        Chi::PathEval(checks) => {
            for (i, ck) in checks.iter().enumerate() {
                for &(tau, site) in ck {
                    if !(tau >= 0.0 && tau <= c.s) {
                        return Err(domain!("path check at time {tau} outside [0, {}]", c.s));
                    }
                    let here = c
                        .site_at(i, c.s - tau)
                        .ok_or_else(|| Error::Mode("path checks need a spatial dual".to_string()))?;
                    if here != site {
                        factor = 0.0;
                    }
                }
            }
        }
        Chi::PathOccupation(_) => return Err(Error::Mode("occupation functionals have no dual pairing".to_string())),
    }
    if factor == 0.0 || u0.forest.is_zero() {
        return Ok(Estimate::exact(0.0));
    }
    let loc = u0.location_view();
    let blocks = c.blocks();
    let m = blocks.len();
    let block_site: Vec<Option<Site>> = blocks.iter().map(|b| c.sites.as_ref().map(|s| s[b[0]])).collect();
    let mut which = vec![0usize; c.n()];
    for (k, b) in blocks.iter().enumerate() {
        b.iter().for_each(|&i| which[i] = k);
    }
    let weight = |id: u32, k: usize| -> f64 {
        let atoms = loc.forest.leaf(id).expect("leaf").atoms();
        match block_site[k] {
            None => atoms.iter().map(|a| a.1).sum(),
            Some(x) => atoms.iter().filter(|a| a.0 == Mark::Site(x)).map(|a| a.1).sum(),
        }
    };
    let n = c.n();
    let f = |rb: &[f64]| -> f64 {
        let mut r = vec![0.0; n * (n - 1) / 2];
        for i in 0..n {
            for j in i + 1..n {
                let (bi, bj) = (which[i].min(which[j]), which[i].max(which[j]));
                let rp = if bi == bj { 0.0 } else { rb[pair_index(m, bi, bj)] };
                r[pair_index(n, i, j)] = rp + c.r.get(i, j);
            }
        }
        spec.phi.eval(n, &r) * window.value(&r)
    };
    let e = ev.integrate(&loc.forest, m, &weight, &f, window.radius());
    Ok(Estimate { value: e.value * factor, se: e.se * factor, exact: e.exact })
}

pub fn duality_pairing_ums(
    u0: &Ums,
    c: &CoalescentState,
    spec: &PhiSpec,
    window: Window,
    ev: &Evaluator,
) -> Result<Estimate> {
    duality_pairing(&MarkedUms::at_site(u0, 0), c, spec, window, ev)
}

/// Both sides of the duality at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualityConfig {
    /// Individuals per unit mass on the forward side.
    pub n_individuals: u32,
    pub dual: DualConfig,
    pub t: f64,
    pub spec: PhiSpec,
    pub window: Window,
    pub u0: MarkedUms,
    pub space: Option<SiteSpace>,
}

impl DualityConfig {
    pub fn forward_config(&self) -> Result<GwConfig> {
        GwConfig::new(self.n_individuals, self.dual.a, self.dual.b, self.t)
    }

    fn initial_state(&self) -> Result<CoalescentState> {
        match (&self.spec.chi, &self.space) {
            (Chi::Sites(s), Some(_)) => Ok(CoalescentState::spatial(s.clone())),
            (Chi::Sites(_), None) => Err(Error::Mode("site functionals need a site space".to_string())),
            (Chi::PathEval(c), Some(_)) => {
                let start: Option<Vec<Site>> =
                    c.iter().map(|ck| ck.iter().find(|x| x.0 == self.t).map(|x| x.1)).collect();
                start
                    .map(CoalescentState::spatial)
                    .ok_or_else(|| Error::Mode("every path check needs the present site".to_string()))
            }
            (_, Some(_)) => Err(Error::Mode("spatial duality needs site or path functionals".to_string())),
            (Chi::One, None) => Ok(CoalescentState::new(self.spec.n)),
            _ => Err(Error::Mode("path functionals need a site space".to_string())),
        }
    }

    /// One draw of `Phi^{n, phi * window, chi}(U_t)`.
    pub fn forward_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let cfg = self.forward_config()?;
        let paths = self.spec.chi.needs_paths();
        let u = sample_marked(&cfg, &self.u0, self.space.as_ref(), self.t, paths, rng)?;
        let ev = Evaluator { seed: rng.random(), ..Evaluator::default() };
        Ok(u.eval_windowed(&self.spec, self.window, &ev)?.value)
    }

    /// One draw of the pairing and the weight `exp(beta)`.
    pub fn dual_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(f64, f64)> {
        let st = self.initial_state()?;
        let end = run(&self.dual, self.space.as_ref(), st, self.t, rng, None);
        let ev = Evaluator { seed: rng.random(), ..Evaluator::default() };
        Ok((duality_pairing(&self.u0, &end, &self.spec, self.window, &ev)?.value, end.weight()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualityReport {
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub z: f64,
    pub replicates: usize,
    /// Effective sample size of the Feynman-Kac weights.
    pub ess: f64,
}

/// Accumulates dual draws into the weighted estimate.
#[derive(Clone, Copy, Debug, Default)]
pub struct DualAccumulator {
    pub values: Moments,
    pub sum_w: f64,
    pub sum_w2: f64,
}

impl DualAccumulator {
    pub fn push(&mut self, value: f64, weight: f64) {
        self.values.push(value * weight);
        self.sum_w += weight;
        self.sum_w2 += weight * weight;
    }

    pub fn merge(&mut self, o: &DualAccumulator) {
        self.values.merge(&o.values);
        self.sum_w += o.sum_w;
        self.sum_w2 += o.sum_w2;
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(self.sum_w, self.sum_w2)
    }
}

pub fn report(lhs: &Moments, rhs: &DualAccumulator) -> DualityReport {
    let (l, r) = (lhs.mean_estimate(), rhs.values.mean_estimate());
    DualityReport { lhs: l, rhs: r, z: z_score(l, r), replicates: lhs.count() as usize, ess: rhs.ess() }
}

/// Sequential check: replicate `i` of each side uses stream `(seed, 2i)` / `(seed, 2i+1)`.
pub fn duality_check(cfg: &DualityConfig, replicates: usize, seed: u64) -> Result<DualityReport> {
    let mut lhs = Moments::new();
    let mut rhs = DualAccumulator::default();
    for i in 0..replicates as u64 {
        lhs.push(cfg.forward_sample(&mut replicate_rng(seed, 2 * i))?);
        let (v, w) = cfg.dual_sample(&mut replicate_rng(seed, 2 * i + 1))?;
        rhs.push(v, w);
    }
    Ok(report(&lhs, &rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polynomials::Phi;
    use crate::umspace::Tree;

    #[test]
    fn single_lineage() {
        let cfg = DualConfig::new(0.0, 1.0).unwrap();
        let tr = simulate_kingman(1, &cfg, 2.0, &mut replicate_rng(1, 0));
        assert_eq!(tr.last().beta, 0.0);
        assert_eq!(tr.last().weight(), 1.0);
        assert_eq!(tr.states.len(), 2);
    }

    #[test]
    fn two_lineages_grow_then_stop() {
        let cfg = DualConfig::new(0.0, 1.0).unwrap();
        for i in 0..50 {
            let tr = simulate_kingman(2, &cfg, 1.0, &mut replicate_rng(9, i));
            let end = tr.last();
            if end.block_count() == 2 {
                assert!((end.r.get(0, 1) - 2.0).abs() < 1e-12);
                assert!((end.beta - 1.0).abs() < 1e-12);
            } else {
                let tm = tr.states[1].s;
                assert!((end.r.get(0, 1) - 2.0 * tm).abs() < 1e-12);
                assert!((end.beta - tm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairing_two_leaf_by_hand() {
        let u0 = Ums::from_trees(0.0, vec![Tree::node(0.5, vec![Tree::Leaf(1.0), Tree::Leaf(2.0)])]).unwrap();
        let mut c = CoalescentState::new(2);
        c.r.set(0, 1, 1.0);
        let spec = PhiSpec::new(2, Phi::ExpSum(1.0)).unwrap();
        let v = duality_pairing_ums(&u0, &c, &spec, Window::None, &Evaluator::default()).unwrap().value;
        let oracle = 1.0 * 1.0 * (-1.0f64).exp() + 2.0 * 2.0 * (-1.0f64).exp() + 2.0 * 1.0 * 2.0 * (-2.0f64).exp();
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn pairing_at_start_is_forward_functional() {
        let u0 = Ums::from_trees(
            0.0,
            vec![Tree::node(0.3, vec![Tree::Leaf(0.5), Tree::node(0.1, vec![Tree::Leaf(1.0), Tree::Leaf(0.25)])])],
        )
        .unwrap();
        let spec = PhiSpec::new(3, Phi::ExpSum(0.7)).unwrap();
        let w = Window::Smooth(Default::default(), 0.4);
        let a = duality_pairing_ums(&u0, &CoalescentState::new(3), &spec, w, &Evaluator::default()).unwrap().value;
        let b = crate::polynomials::eval_windowed(&u0, &spec, w, &Evaluator::default()).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn identity_kernel_never_merges() {
        let cfg = DualConfig::new(0.0, 1.0).unwrap();
        let sp = SiteSpace::identity(3);
        let tr = simulate_spatial_coalescent(vec![0, 1, 2], &sp, &cfg, 5.0, &mut replicate_rng(4, 0)).unwrap();
        assert_eq!(tr.last().block_count(), 3);
        assert_eq!(tr.last().beta, 0.0);
    }

    #[test]
    fn frozen_elements_wait() {
        let cfg = DualConfig::new(0.0, 1.0).unwrap();
        let tr = simulate_time_space(vec![0.0, 0.5], None, &cfg, 0.5, &mut replicate_rng(2, 0)).unwrap();
        let end = tr.last();
        assert_eq!(end.block_count(), 2);
        assert!((end.r.get(0, 1) - 0.5).abs() < 1e-12);
        assert_eq!(end.beta, 0.0);
    }

    #[test]
    fn zero_time_duality_exact() {
        let u0 = Ums::from_trees(0.0, vec![Tree::Leaf(1.0)]).unwrap();
        let cfg = DualityConfig {
            n_individuals: 10,
            dual: DualConfig::new(0.0, 1.0).unwrap(),
            t: 0.0,
            spec: PhiSpec::new(2, Phi::Constant(1.0)).unwrap(),
            window: Window::None,
            u0: MarkedUms::at_site(&u0, 0),
            space: None,
        };
        let r = duality_check(&cfg, 20, 1).unwrap();
        assert!((r.lhs.value - 1.0).abs() < 1e-12);
        assert_eq!(r.rhs.value, 1.0);
    }
}
