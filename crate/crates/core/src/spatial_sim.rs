//! Marked genealogies on a finite site space.
//!
//! Individuals carry either their current site (location marks) or their
//! whole line-of-descent path (ancestral-path marks). Raw paths use absolute
//! time, adjusted paths are shifted so that the present is time 0.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{domain, invalid};
use crate::feller_sim::{self, Genealogy, GwConfig};
use crate::polynomials::{Chi, Evaluator, PhiSpec, Window};
use crate::stats::Estimate;
use crate::umspace::{put_quantized, Forest, LeafData, Ums};
use crate::{Error, Result};

pub type Site = u32;

/// Finite site space with migration kernel `a`. Individuals jump at rate 1 with
/// the reversed kernel `abar(x, y) = a(y, x)`; dual lineages jump with `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteSpace {
    k: usize,
    a: Vec<f64>,
}

impl SiteSpace {
    /// `a` must be square, nonnegative and doubly stochastic.
    pub fn new(a: Vec<Vec<f64>>) -> Result<Self> {
        let k = a.len();
        if k == 0 {
            return Err(domain!("site space needs at least one site"));
        }
        let mut flat = Vec::with_capacity(k * k);
        for row in &a {
            if row.len() != k {
                return Err(domain!("migration kernel must be square"));
            }
            if row.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return Err(domain!("migration kernel entries must be finite and >= 0"));
            }
            flat.extend_from_slice(row);
        }
        for i in 0..k {
            let row: f64 = (0..k).map(|j| flat[i * k + j]).sum();
            let col: f64 = (0..k).map(|j| flat[j * k + i]).sum();
            if (row - 1.0).abs() > 1e-9 || (col - 1.0).abs() > 1e-9 {
                return Err(domain!("migration kernel must be doubly stochastic (site {i}: row {row}, column {col})"));
            }
        }
        Ok(SiteSpace { k, a: flat })
    }

    pub fn single() -> Self {
        SiteSpace { k: 1, a: vec![1.0] }
    }

    pub fn uniform(k: usize) -> Self {
        SiteSpace { k, a: vec![1.0 / k as f64; k * k] }
    }

    pub fn identity(k: usize) -> Self {
        let mut a = vec![0.0; k * k];
        (0..k).for_each(|i| a[i * k + i] = 1.0);
        SiteSpace { k, a }
    }

    pub fn sites(&self) -> usize {
        self.k
    }

    pub fn a(&self, i: Site, j: Site) -> f64 {
        self.a[i as usize * self.k + j as usize]
    }

    pub fn abar(&self, i: Site, j: Site) -> f64 {
        self.a(j, i)
    }

    pub fn kernel(&self) -> Vec<Vec<f64>> {
        (0..self.k).map(|i| self.a[i * self.k..(i + 1) * self.k].to_vec()).collect()
    }

    /// Rate at which a forward individual leaves `x`.
    pub fn move_rate(&self, x: Site) -> f64 {
        1.0 - self.abar(x, x)
    }

    pub fn max_move_rate(&self) -> f64 {
        (0..self.k as Site).map(|x| self.move_rate(x)).fold(0.0, f64::max)
    }

    /// Destination of a forward move out of `x` (never `x`).
    pub fn forward_destination<R: Rng + ?Sized>(&self, x: Site, rng: &mut R) -> Site {
        self.pick(x, rng, |y| self.abar(x, y))
    }

    /// Rate at which a dual lineage leaves `x`.
    pub fn dual_move_rate(&self, x: Site) -> f64 {
        1.0 - self.a(x, x)
    }

    pub fn dual_destination<R: Rng + ?Sized>(&self, x: Site, rng: &mut R) -> Site {
        self.pick(x, rng, |y| self.a(x, y))
    }

    fn pick<R: Rng + ?Sized>(&self, x: Site, rng: &mut R, w: impl Fn(Site) -> f64) -> Site {
        let total: f64 = (0..self.k as Site).filter(|&y| y != x).map(&w).sum();
        let mut u = rng.random::<f64>() * total;
        let mut last = x;
        for y in (0..self.k as Site).filter(|&y| y != x) {
            let wy = w(y);
            if wy > 0.0 {
                last = y;
                if u < wy {
                    return y;
                }
                u -= wy;
            }
        }
        last
    }

    /// Continuous-time walk with kernel `abar` from `x` over `(t0, t1]`,
    /// recording jumps when `jumps` is given. Returns the final site.
    pub fn walk<R: Rng + ?Sized>(
        &self,
        mut x: Site,
        mut t0: f64,
        t1: f64,
        rng: &mut R,
        mut jumps: Option<&mut Vec<(f64, Site)>>,
    ) -> Site {
        loop {
            let rate = self.move_rate(x);
            if rate <= 0.0 {
                return x;
            }
            t0 += crate::rng::exponential(rng, rate);
            if t0 > t1 {
                return x;
            }
            x = self.forward_destination(x, rng);
            if let Some(j) = jumps.as_deref_mut() {
                j.push((t0, x));
            }
        }
    }

    fn check_site(&self, s: Site) -> Result<()> {
        if (s as usize) < self.k {
            Ok(())
        } else {
            Err(domain!("site {s} outside a space of {} sites", self.k))
        }
    }
}

/// Piecewise-constant right-continuous path: `start` before the first jump,
/// then the site of the last jump at or before the query time.
#[derive(Clone, Debug, PartialEq)]
pub struct AncestralPath {
    start: Site,
    jumps: Vec<(f64, Site)>,
}

impl AncestralPath {
    pub fn constant(site: Site) -> Self {
        AncestralPath { start: site, jumps: Vec::new() }
    }

    /// Jumps must have strictly increasing times; repeated sites are dropped.
    pub fn new(start: Site, jumps: Vec<(f64, Site)>) -> Result<Self> {
        let mut p = AncestralPath::constant(start);
        for (t, s) in jumps {
            if !t.is_finite() {
                return Err(invalid!("jump times must be finite"));
            }
            if let Some(&(last, _)) = p.jumps.last() {
                if t <= last {
                    return Err(invalid!("jump times must increase strictly"));
                }
            }
            p.push(t, s);
        }
        Ok(p)
    }

    pub fn start(&self) -> Site {
        self.start
    }

    pub fn jumps(&self) -> &[(f64, Site)] {
        &self.jumps
    }

    pub fn current(&self) -> Site {
        self.jumps.last().map_or(self.start, |j| j.1)
    }

    /// Append a move; ignored when it does not change the site.
    pub fn push(&mut self, t: f64, s: Site) {
        if s != self.current() {
            self.jumps.push((t, s));
        }
    }

    pub fn value_at(&self, t: f64) -> Site {
        let k = self.jumps.partition_point(|j| j.0 <= t);
        if k == 0 {
            self.start
        } else {
            self.jumps[k - 1].1
        }
    }

    pub fn shifted(&self, dt: f64) -> Self {
        AncestralPath { start: self.start, jumps: self.jumps.iter().map(|&(t, s)| (t + dt, s)).collect() }
    }

    /// Path frozen at `v(t0)` on `(-inf, t0]`.
    pub fn frozen_before(&self, t0: f64) -> Self {
        let k = self.jumps.partition_point(|j| j.0 <= t0);
        AncestralPath { start: self.value_at(t0), jumps: self.jumps[k..].to_vec() }
    }

    /// Agreement on `(-inf, t0]`.
    pub fn agrees_before(&self, other: &Self, t0: f64) -> bool {
        self.frozen_before(t0).start == other.frozen_before(t0).start
            && self.jumps.iter().take_while(|j| j.0 <= t0).eq(other.jumps.iter().take_while(|j| j.0 <= t0))
    }

    /// Fraction of `[from, to]` spent at `site` (point value when `from == to`).
    pub fn occupation(&self, site: Site, from: f64, to: f64) -> f64 {
        if !(to > from) {
            return (self.value_at(from) == site) as u8 as f64;
        }
        let mut total = 0.0;
        let mut cur = self.value_at(from);
        let mut t = from;
        for &(tj, sj) in self.jumps.iter().filter(|j| j.0 > from && j.0 < to) {
            if cur == site {
                total += tj - t;
            }
            cur = sj;
            t = tj;
        }
        if cur == site {
            total += to - t;
        }
        total / (to - from)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mark {
    Site(Site),
    Path(AncestralPath),
}

impl Mark {
    fn encode(&self, out: &mut Vec<u8>, quantum: f64) {
        match self {
            Mark::Site(s) => {
                out.push(b's');
                out.extend_from_slice(&s.to_be_bytes());
            }
            Mark::Path(p) => {
                out.push(b'p');
                out.extend_from_slice(&p.start.to_be_bytes());
                out.extend_from_slice(&(p.jumps.len() as u32).to_be_bytes());
                for &(t, s) in &p.jumps {
                    put_quantized(out, t, quantum);
                    out.extend_from_slice(&s.to_be_bytes());
                }
            }
        }
    }
}

/// Mark distribution of a point: atoms `(mark, mass)` with distinct marks.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MarkKernel(Vec<(Mark, f64)>);

impl MarkKernel {
    pub fn atom(mark: Mark, mass: f64) -> Self {
        MarkKernel(vec![(mark, mass)])
    }

    pub fn from_atoms(atoms: impl IntoIterator<Item = (Mark, f64)>) -> Self {
        let mut k = MarkKernel::default();
        for (m, w) in atoms {
            k.add(m, w);
        }
        k
    }

    pub fn atoms(&self) -> &[(Mark, f64)] {
        &self.0
    }

    pub fn add(&mut self, mark: Mark, mass: f64) {
        if mass <= 0.0 {
            return;
        }
        match self.0.iter_mut().find(|a| a.0 == mark) {
            Some(a) => a.1 += mass,
            None => self.0.push((mark, mass)),
        }
    }

    pub fn map_marks(&self, f: impl Fn(&Mark) -> Mark) -> Self {
        MarkKernel::from_atoms(self.0.iter().map(|(m, w)| (f(m), *w)))
    }
}

impl LeafData for MarkKernel {
    fn mass(&self) -> f64 {
        self.0.iter().map(|a| a.1).sum()
    }

    fn absorb(&mut self, other: Self) {
        for (m, w) in other.0 {
            self.add(m, w);
        }
    }

    fn encode(&self, out: &mut Vec<u8>, quantum: f64) {
        let mut parts: Vec<Vec<u8>> = self
            .0
            .iter()
            .map(|(m, w)| {
                let mut e = Vec::new();
                m.encode(&mut e, quantum);
                put_quantized(&mut e, *w, quantum);
                e
            })
            .collect();
        parts.sort();
        out.extend_from_slice(&(parts.len() as u32).to_be_bytes());
        parts.iter().for_each(|p| out.extend_from_slice(p));
    }
}

/// How marks are read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MarkMode {
    Location,
    /// Paths in absolute time; `now` is the current time.
    RawPath {
        now: f64,
    },
    /// Paths shifted so that the present is time 0.
    AdjustedPath,
}

impl MarkMode {
    pub fn is_path(&self) -> bool {
        !matches!(self, MarkMode::Location)
    }

    pub fn present(&self) -> f64 {
        match *self {
            MarkMode::RawPath { now } => now,
            _ => 0.0,
        }
    }
}

/// Ultrametric measure space whose points carry mark kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkedUms {
    pub forest: Forest<MarkKernel>,
    pub mode: MarkMode,
}

impl MarkedUms {
    pub fn new(forest: Forest<MarkKernel>, mode: MarkMode) -> Result<Self> {
        for id in forest.leaf_ids() {
            for (m, _) in forest.leaf(id).expect("leaf").atoms() {
                match (m, mode.is_path()) {
                    (Mark::Site(_), false) | (Mark::Path(_), true) => {}
                    _ => return Err(Error::Mode("marks do not match the declared mode".to_string())),
                }
            }
        }
        Ok(MarkedUms { forest, mode })
    }

    pub fn zero(mode: MarkMode) -> Self {
        MarkedUms { forest: Forest::zero(), mode }
    }

    /// Every point of `u` at one site.
    pub fn at_site(u: &Ums, site: Site) -> Self {
        let forest = u.map(u.ceiling(), |h| h, |m| MarkKernel::atom(Mark::Site(site), *m)).expect("same shape");
        MarkedUms { forest, mode: MarkMode::Location }
    }

    pub fn total_mass(&self) -> f64 {
        self.forest.total_mass()
    }

    pub fn unmarked(&self) -> Ums {
        self.forest.map(self.forest.ceiling(), |h| h, |k| k.mass()).expect("same shape")
    }

    pub fn check_sites(&self, space: &SiteSpace) -> Result<()> {
        for id in self.forest.leaf_ids() {
            for (m, _) in self.forest.leaf(id).expect("leaf").atoms() {
                match m {
                    Mark::Site(s) => space.check_site(*s)?,
                    Mark::Path(p) => {
                        space.check_site(p.start)?;
                        for &(_, s) in &p.jumps {
                            space.check_site(s)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn map_marks(
        &self,
        mode: MarkMode,
        ceiling: f64,
        h: impl Fn(f64) -> f64,
        f: impl Fn(&Mark) -> Mark,
    ) -> Result<Self> {
        let forest = self.forest.map(ceiling, h, |k| k.map_marks(&f))?;
        Ok(MarkedUms { forest, mode })
    }

    /// Current sites: path marks evaluated at the present.
    pub fn location_view(&self) -> Self {
        let now = self.mode.present();
        self.map_marks(
            MarkMode::Location,
            self.forest.ceiling(),
            |h| h,
            |m| match m {
                Mark::Path(p) => Mark::Site(p.value_at(now)),
                other => other.clone(),
            },
        )
        .expect("same shape")
    }

    /// The map `R_t`: raw paths in `D_{0,t}` shifted to `D_{-t,0}`.
    pub fn adjust_paths(&self, t: f64) -> Result<Self> {
        match self.mode {
            MarkMode::RawPath { .. } => {}
            _ => return Err(Error::Mode("adjust_paths needs raw path marks".to_string())),
        }
        self.map_marks(
            MarkMode::AdjustedPath,
            self.forest.ceiling(),
            |h| h,
            |m| match m {
                Mark::Path(p) => Mark::Path(p.shifted(-t)),
                other => other.clone(),
            },
        )
    }

    /// Inverse of [`MarkedUms::adjust_paths`].
    pub fn unadjust_paths(&self, t: f64) -> Result<Self> {
        if self.mode != MarkMode::AdjustedPath {
            return Err(Error::Mode("unadjust_paths needs adjusted path marks".to_string()));
        }
        self.map_marks(
            MarkMode::RawPath { now: t },
            self.forest.ceiling(),
            |h| h,
            |m| match m {
                Mark::Path(p) => Mark::Path(p.shifted(t)),
                other => other.clone(),
            },
        )
    }

    /// Distances capped at `2h`; path marks frozen before the depth-`h` window.
    pub fn truncate_marked(&self, h: f64) -> Result<Self> {
        if !(h >= 0.0) {
            return Err(domain!("truncation level must be >= 0, got {h}"));
        }
        let cut = self.mode.present() - h;
        let freeze = self.mode.is_path();
        self.map_marks(
            self.mode,
            self.forest.ceiling().min(h),
            |x| x.min(h),
            |m| match m {
                Mark::Path(p) if freeze => Mark::Path(p.frozen_before(cut)),
                other => other.clone(),
            },
        )
    }

    pub fn concat_marked(&self, other: &Self, h: f64) -> Result<Self> {
        if self.mode != other.mode && !self.forest.is_zero() && !other.forest.is_zero() {
            return Err(Error::Mode("cannot concatenate spaces with different mark modes".to_string()));
        }
        let mode = if self.forest.is_zero() { other.mode } else { self.mode };
        let a = self.truncate_marked(h)?;
        let b = other.truncate_marked(h)?;
        Ok(MarkedUms { forest: a.forest.concat(&b.forest, h)?, mode })
    }

    /// Push-forward of the mass measure onto paths, identical paths merged.
    pub fn historical_projection(&self) -> Result<Vec<(AncestralPath, f64)>> {
        if !self.mode.is_path() {
            return Err(Error::Mode("historical projection needs path marks".to_string()));
        }
        let mut out: Vec<(AncestralPath, f64)> = Vec::new();
        for id in self.forest.leaf_ids() {
            for (m, w) in self.forest.leaf(id).expect("leaf").atoms() {
                if let Mark::Path(p) = m {
                    match out.iter_mut().find(|e| e.0 == *p) {
                        Some(e) => e.1 += *w,
                        None => out.push((p.clone(), *w)),
                    }
                }
            }
        }
        Ok(out)
    }

    /// Mass per current site.
    pub fn site_masses(&self) -> BTreeMap<Site, f64> {
        let loc = self.location_view();
        let mut out = BTreeMap::new();
        for id in loc.forest.leaf_ids() {
            for (m, w) in loc.forest.leaf(id).expect("leaf").atoms() {
                if let Mark::Site(s) = m {
                    *out.entry(*s).or_insert(0.0) += *w;
                }
            }
        }
        out
    }

    fn chi_factor(&self, chi: &Chi, k: usize, mark: &Mark) -> f64 {
        match (chi, mark) {
            (Chi::One, _) => 1.0,
            (Chi::Sites(s), Mark::Site(x)) => (s[k] == *x) as u8 as f64,
            (Chi::PathEval(c), Mark::Path(p)) => c[k].iter().all(|&(t, s)| p.value_at(t) == s) as u8 as f64,
            (Chi::PathOccupation(c), Mark::Path(p)) => c[k].iter().map(|&(s, a, b)| p.occupation(s, a, b)).product(),
            _ => 0.0,
        }
    }

    fn check_chi(&self, chi: &Chi) -> Result<()> {
        let ok = match chi {
            Chi::One => true,
            Chi::Sites(_) => !self.mode.is_path(),
            Chi::PathEval(_) | Chi::PathOccupation(_) => self.mode.is_path(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Mode(alloc::format!("chi `{}` does not apply to {:?} marks", chi.id(), self.mode)))
        }
    }

    /// `Phi^{n, phi * window, chi}`.
    pub fn eval_windowed(&self, spec: &PhiSpec, window: Window, ev: &Evaluator) -> Result<Estimate> {
        self.check_chi(&spec.chi)?;
        let n = spec.n;
        let weight = |id: u32, k: usize| -> f64 {
            self.forest.leaf(id).expect("leaf").atoms().iter().map(|(m, w)| w * self.chi_factor(&spec.chi, k, m)).sum()
        };
        let f = |r: &[f64]| spec.phi.eval(n, r) * window.value(r);
        Ok(ev.integrate(&self.forest, n, &weight, &f, window.radius()))
    }

    pub fn eval_marked_polynomial(&self, spec: &PhiSpec) -> Result<Estimate> {
        self.eval_windowed(spec, Window::None, &Evaluator::default())
    }

    pub fn eval_truncated(&self, spec: &PhiSpec, t: f64) -> Result<Estimate> {
        self.eval_windowed(spec, Window::Sharp(t), &Evaluator::default())
    }
}

/// Per-site mass of a path measure at time `t`.
pub fn occupation_measure(projection: &[(AncestralPath, f64)], t: f64) -> BTreeMap<Site, f64> {
    let mut out = BTreeMap::new();
    for (p, w) in projection {
        *out.entry(p.value_at(t)).or_insert(0.0) += *w;
    }
    out
}

/// Branching random walk: the individual model of `feller_sim` plus migration.
pub fn simulate_brw<R: Rng + ?Sized>(
    space: &SiteSpace,
    cfg: &GwConfig,
    init: &MarkedUms,
    rng: &mut R,
) -> Result<Genealogy> {
    init.check_sites(space)?;
    feller_sim::simulate(cfg, init, Some(space), rng)
}

/// Marked state at time `t` of a simulated genealogy.
pub fn extract_marked_ums(g: &Genealogy, t: f64, paths: bool) -> Result<MarkedUms> {
    g.extract(t, paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polynomials::Phi;
    use crate::umspace::Tree;

    fn path(start: Site, jumps: &[(f64, Site)]) -> AncestralPath {
        AncestralPath::new(start, jumps.to_vec()).unwrap()
    }

    #[test]
    fn adjusted_truncation_example() {
        // Jumps at -0.9 and -0.3, h = 0.5: the -0.9 jump disappears, the value before -0.5 is v(-0.5).
        let p = path(0, &[(-0.9, 1), (-0.3, 2)]);
        let f = p.frozen_before(-0.5);
        assert_eq!(f.start(), 1);
        assert_eq!(f.jumps(), &[(-0.3, 2)]);
        assert_eq!(f.value_at(-5.0), 1);
        assert_eq!(f.frozen_before(-0.5), f);
    }

    #[test]
    fn shift_round_trip() {
        let p = path(2, &[(0.25, 0), (0.75, 1)]);
        assert_eq!(p.shifted(-1.0).jumps(), &[(-0.75, 0), (-0.25, 1)]);
        assert_eq!(p.shifted(-1.0).shifted(1.0), p);
        assert_eq!(AncestralPath::constant(3).shifted(-2.0), AncestralPath::constant(3));
    }

    #[test]
    fn kernel_validation() {
        assert!(SiteSpace::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).is_ok());
        assert!(SiteSpace::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).is_err());
        assert!(SiteSpace::new(vec![vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn marked_site_polynomial() {
        let u = Forest::from_trees(
            0.0,
            vec![Tree::node(
                0.4,
                vec![
                    Tree::Leaf(MarkKernel::atom(Mark::Site(0), 1.5)),
                    Tree::Leaf(MarkKernel::from_atoms([(Mark::Site(1), 0.5), (Mark::Site(0), 0.25)])),
                ],
            )],
        )
        .unwrap();
        let mu = MarkedUms::new(u, MarkMode::Location).unwrap();
        let s = PhiSpec::marked(1, Phi::Constant(1.0), Chi::Sites(vec![0])).unwrap();
        assert!((mu.eval_marked_polynomial(&s).unwrap().value - 1.75).abs() < 1e-15);
        let plain = PhiSpec::new(2, Phi::ExpSum(1.0)).unwrap();
        let a = mu.eval_marked_polynomial(&plain).unwrap().value;
        let b = crate::polynomials::eval_polynomial(&mu.unmarked(), &plain).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn path_eval_two_leaves_by_hand() {
        // Leaves x (mass 1, path 0 -> 1 at -0.1) and y (mass 2, constant 1), distance 0.6.
        let x = MarkKernel::atom(Mark::Path(path(0, &[(-0.1, 1)])), 1.0);
        let y = MarkKernel::atom(Mark::Path(AncestralPath::constant(1)), 2.0);
        let u = Forest::from_trees(0.0, vec![Tree::node(0.3, vec![Tree::Leaf(x), Tree::Leaf(y)])]).unwrap();
        let mu = MarkedUms::new(u, MarkMode::AdjustedPath).unwrap();
        // chi_k: at site 0 at time -0.2 (sample 1) and at site 1 at time 0 (sample 2).
        let chi = Chi::PathEval(vec![vec![(-0.2, 0)], vec![(0.0, 1)]]);
        let s = PhiSpec::marked(2, Phi::ExpSum(1.0), chi).unwrap();
        // Sample 1 must be x (weight 1); sample 2 is x or y (weights 1, 2).
        let oracle = 1.0 * 1.0 * 1.0 + 1.0 * 2.0 * (-0.6f64).exp();
        assert!((mu.eval_marked_polynomial(&s).unwrap().value - oracle).abs() < 1e-12);
    }

    #[test]
    fn truncation_merges_frozen_paths() {
        let x = MarkKernel::atom(Mark::Path(path(0, &[(-0.9, 1)])), 1.0);
        let y = MarkKernel::atom(Mark::Path(AncestralPath::constant(1)), 2.0);
        let u = Forest::from_trees(0.0, vec![Tree::node(0.3, vec![Tree::Leaf(x), Tree::Leaf(y)])]).unwrap();
        let mu = MarkedUms::new(u, MarkMode::AdjustedPath).unwrap();
        let z = mu.truncate_marked(0.0).unwrap();
        assert_eq!(z.forest.leaf_count(), 1);
        let proj = z.historical_projection().unwrap();
        assert_eq!(proj, vec![(AncestralPath::constant(1), 3.0)]);
    }

    #[test]
    fn occupation_fraction() {
        let p = path(0, &[(1.0, 1), (3.0, 0)]);
        assert!((p.occupation(1, 0.0, 4.0) - 0.5).abs() < 1e-15);
        assert_eq!(p.occupation(0, 2.0, 2.0), 0.0);
    }
}
