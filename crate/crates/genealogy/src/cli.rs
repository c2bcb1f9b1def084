//! Command dispatch and artifacts.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use genealogy_core::feller_sim::{Genealogy, GwConfig};
use genealogy_core::polynomials::PhiSpec;
use genealogy_core::rng::replicate_rng;
use genealogy_core::spatial_sim::{simulate_brw, MarkMode, MarkedUms, SiteSpace};
use serde::Serialize;

use crate::config::{invalid, Command, ConfigError, ModeConfig, RunConfig};
use crate::io::{genealogy_to_json, marked_to_json, ums_to_json, write_csv, write_json};
use crate::verification::{self as v, columns, TestReport};
use rayon::prelude::*;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAIL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RESOURCE: u8 = 3;

/// Exit code for an error: 2 for configuration problems, 3 for resource caps, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match e.downcast_ref::<genealogy_core::Error>() {
        Some(genealogy_core::Error::Resource(_)) => EXIT_RESOURCE,
        Some(_) => EXIT_CONFIG,
        None => EXIT_FAIL,
    }
}

/// Outcome of a run: a report for test commands, the written files otherwise.
#[derive(Debug)]
pub enum Outcome {
    Report(Box<TestReport>),
    Files(Vec<PathBuf>),
}

impl Outcome {
    pub fn code(&self) -> u8 {
        match self {
            Outcome::Report(r) if !r.pass => EXIT_FAIL,
            _ => EXIT_OK,
        }
    }
}

fn parsed<T: serde::de::DeserializeOwned + Serialize + Default>(cfg: &RunConfig) -> Result<T> {
    cfg.test_config::<T>()
}

/// Runs a validated configuration on the current rayon pool.
pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let report = match cfg.command {
        Command::Simulate => return simulate(cfg).map(Outcome::Files),
        Command::Export => return export(cfg).map(Outcome::Files),
        Command::TestMoment => v::test_moment_recursion(&parsed(cfg)?)?,
        Command::TestBranching => v::test_generalized_branching(&parsed(cfg)?)?,
        Command::TestDuality => v::test_duality(&parsed(cfg)?)?,
        Command::TestAlgebra => v::test_algebra_suite(&parsed(cfg)?)?,
        Command::TestMonotone => v::test_monotone_approximation(&parsed(cfg)?)?,
        Command::TestCalibration => v::test_calibration(&parsed(cfg)?)?,
    };
    if let Some(out) = &cfg.out {
        write_json(out, &report)?;
    }
    Ok(Outcome::Report(Box::new(report)))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.out.as_deref().ok_or_else(|| invalid("an output directory is required"))?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn grow(
    cfg: &RunConfig,
    gw: &GwConfig,
    space: &SiteSpace,
    init: &MarkedUms,
    replicate: u64,
) -> genealogy_core::Result<Genealogy> {
    simulate_brw(space, gw, init, &mut replicate_rng(cfg.seed(), replicate))
}

fn simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    let init = cfg.initial_state()?;
    let space = cfg.site_space()?.unwrap_or_else(SiteSpace::single);
    let paths = cfg.mode == ModeConfig::Path;
    let times = cfg.observation_times();
    let specs: Vec<PhiSpec> = cfg.specs.iter().map(|s| s.to_spec()).collect::<Result<_>>()?;
    let sites = space.sites();
    let gw = cfg.gw()?;
    let reps = if init.total_mass() > 0.0 { cfg.replicates.unwrap_or(100) } else { 0 };
    // Per replicate and time: mass, spec values, site masses.
    let width = 1 + specs.len() + sites;
    let data: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let g = grow(cfg, &gw, &space, &init, i)?;
            let mut row = Vec::with_capacity(times.len() * width);
            for &t in &times {
                let u = g.extract(t, paths)?;
                row.push(u.total_mass());
                for s in &specs {
                    row.push(u.eval_marked_polynomial(s)?.value);
                }
                let m = u.site_masses();
                row.extend((0..sites as u32).map(|x| m.get(&x).copied().unwrap_or(0.0)));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mass_rows: Vec<Vec<f64>> = data
        .iter()
        .enumerate()
        .flat_map(|(i, row)| times.iter().enumerate().map(move |(k, &t)| vec![i as f64, t, row[k * width]]))
        .collect();
    let mass_path = dir.join("mass_paths.csv");
    write_csv(&mass_path, &["replicate".into(), "time".into(), "mass".into()], &mass_rows)?;

    let summary = |offset: usize, count: usize| -> Vec<Vec<f64>> {
        if data.is_empty() {
            return Vec::new();
        }
        times
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let cols: Vec<Vec<f64>> =
                    data.iter().map(|row| row[k * width + offset..k * width + offset + count].to_vec()).collect();
                let mut out = vec![t];
                for m in columns(&cols) {
                    out.push(m.mean());
                    out.push(m.se());
                }
                out
            })
            .collect()
    };
    let mut header = vec!["time".to_string()];
    for s in &specs {
        header.push(format!("{} mean", s.label()));
        header.push(format!("{} se", s.label()));
    }
    let poly_path = dir.join("polynomials.csv");
    write_csv(&poly_path, &header, &summary(1, specs.len()))?;

    let mut header = vec!["time".to_string()];
    for x in 0..sites {
        header.push(format!("site {x} mean"));
        header.push(format!("site {x} se"));
    }
    let occ_path = dir.join("occupation.csv");
    write_csv(&occ_path, &header, &summary(1 + specs.len(), sites))?;
    Ok(vec![mass_path, poly_path, occ_path])
}

fn export(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    let init = cfg.initial_state()?;
    let space = cfg.site_space()?;
    let g = grow(cfg, &cfg.gw()?, space.as_ref().unwrap_or(&SiteSpace::single()), &init, 0)?;
    let log = dir.join("genealogy.json");
    write_json(&log, &genealogy_to_json(&g))?;
    let t = cfg.model.t;
    let state = g.extract(t, cfg.mode == ModeConfig::Path)?;
    let path = dir.join("state.json");
    if space.is_none() && state.mode == MarkMode::Location {
        write_json(&path, &ums_to_json(&state.unmarked()))?;
    } else {
        write_json(&path, &marked_to_json(&state))?;
    }
    Ok(vec![log, path])
}
