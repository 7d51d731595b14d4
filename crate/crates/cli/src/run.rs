//! Experiment drivers. Each writes `report.json` plus CSV plot data into the
//! output directory and returns whether the run finished (`false` maps to
//! exit code 2).

use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use btlab::analytic::{comparator_energy, comparator_quadrature, mobius_energy, ComparatorSpec};
use btlab::bubbletree::{
    degree, extract_tree, lambda_star_bounds, make_synthetic_sequence_with, profile_csvs, Background,
    BoundaryComponent, ExtractionReport, Prototype, SequenceSpec, SyntheticBubble,
};
use btlab::geometry::{AnnulusSpec, HalfBallGrid, MetricField};
use btlab::maps::{io, max_principle_check, p_energy, weak_residual_with, BoundaryMode, DiscreteMap};
use btlab::solver::{
    annulus_extension, minimize_free_boundary_with, neck_comparison, random_small_map, AnnulusProblem,
};

use crate::config::{Config, Kind, Mode, PrototypeKind};

/// Stream of the seeded generator used for trial `i`.
///
/// Every random draw comes from `ChaCha8Rng::seed_from_u64(seed)` switched to
/// stream `i` with `set_stream`, so trials are independent of scheduling.
pub fn trial_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

pub fn run(kind: Kind, cfg: &Config, seed: u64, out: &Path) -> Result<bool> {
    if let Some(k) = cfg.experiment {
        if k != kind {
            bail!("config is for experiment {k:?}, not {kind:?}");
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match kind {
        Kind::Solve => solve(cfg, seed, out),
        Kind::MobiusSweep => mobius_sweep(cfg, out),
        Kind::Extract => extract(cfg, out, false),
        Kind::VerifyIdentity => extract(cfg, out, true),
        Kind::GapTest => gap_test(cfg, seed, out),
        Kind::Degree => degrees(cfg, out),
        Kind::Neck => neck(cfg, out),
    }
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    let path = out.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(out: &Path, value: &T) -> Result<()> {
    write(out, "report.json", &(serde_json::to_string_pretty(value)? + "\n"))
}

fn grid(cfg: &Config) -> Result<Arc<HalfBallGrid>> {
    let g = &cfg.grid;
    Ok(Arc::new(HalfBallGrid::new(g.n, g.r, g.h, g.half)?))
}

fn boundary_mode(m: Mode) -> BoundaryMode {
    match m {
        Mode::Dirichlet => BoundaryMode::Dirichlet,
        Mode::Free => BoundaryMode::Free,
    }
}

fn load(path: &Path) -> Result<DiscreteMap> {
    io::load(path).with_context(|| format!("loading map {}", path.display()))
}

fn oscillation(map: &DiscreteMap) -> f64 {
    let c = map.value(0);
    (0..map.grid().len())
        .flat_map(|i| map.value(i).iter().zip(c).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

fn solve(cfg: &Config, seed: u64, out: &Path) -> Result<bool> {
    let init = match &cfg.input.map {
        Some(p) => load(p)?,
        None => random_small_map(grid(cfg)?, &MetricField::euclidean(cfg.grid.n), f64::INFINITY, &mut trial_rng(seed, 0))?,
    };
    let n = init.grid().n();
    let metric = MetricField::euclidean(n);
    let sc = cfg.solver.build(n);
    let mode = boundary_mode(cfg.solver.mode);
    let (u, log) = minimize_free_boundary_with(&init, &metric, &sc, mode)?;
    let residual = weak_residual_with(&u, &metric, sc.p, mode)?.norm;
    let (max_ok, _, max_norm) = max_principle_check(&u);
    io::save(&u, &out.join("solution.map"))?;
    write(out, "convergence.csv", &log.to_csv())?;
    write_json(
        out,
        &json!({
            "experiment": "solve",
            "p": sc.p,
            "energy": p_energy(&u, &metric, sc.p)?.total,
            "iterations": log.rows.last().map_or(0, |r| r.iter),
            "residual": residual,
            "residual_tol": sc.residual_tol,
            "monotone": log.is_monotone(),
            "max_principle": max_ok,
            "max_norm": max_norm,
        }),
    )?;
    Ok(true)
}

#[derive(Serialize)]
struct SweepRow {
    a: Vec<f64>,
    abs_a: f64,
    energy: f64,
}

fn mobius_sweep(cfg: &Config, out: &Path) -> Result<bool> {
    let n = cfg.grid.n;
    let mut dir = cfg.sweep.direction.clone().unwrap_or_else(|| {
        let mut e = vec![0.0; n];
        e[0] = 1.0;
        e
    });
    if dir.len() != n {
        bail!("sweep.direction has {} components, grid has n = {n}", dir.len());
    }
    let l = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if l == 0.0 {
        bail!("sweep.direction must be nonzero");
    }
    dir.iter_mut().for_each(|v| *v /= l);
    let rows: Vec<SweepRow> = cfg
        .sweep
        .radii
        .par_iter()
        .map(|&s| {
            let a: Vec<f64> = dir.iter().map(|v| s * v).collect();
            let energy = mobius_energy(n, &a, cfg.grid.h)?;
            Ok(SweepRow { a, abs_a: s, energy })
        })
        .collect::<Result<_>>()?;
    let lo = rows.iter().map(|r| r.energy).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.energy).fold(f64::NEG_INFINITY, f64::max);
    let mean = rows.iter().map(|r| r.energy).sum::<f64>() / rows.len() as f64;
    let mut csv = csv::Writer::from_writer(vec![]);
    csv.write_record(["abs_a", "energy"])?;
    for r in &rows {
        csv.write_record([r.abs_a.to_string(), r.energy.to_string()])?;
    }
    write(out, "sweep.csv", &String::from_utf8(csv.into_inner()?)?)?;
    write_json(
        out,
        &json!({
            "experiment": "mobius-sweep",
            "n": n,
            "h": cfg.grid.h,
            "rows": rows,
            "max_relative_spread": (hi - lo) / mean,
        }),
    )?;
    Ok(true)
}

/// Sequence from map files or the synthetic generator.
fn sequence(cfg: &Config) -> Result<(SequenceSpec, Vec<String>)> {
    let s = cfg.sequence.as_ref().ok_or_else(|| anyhow!("missing [sequence] section"))?;
    let ks = s.ks();
    let alphas = s.alphas();
    if let Some(paths) = &s.maps {
        let maps = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
        let n = maps[0].grid().n();
        let ps = alphas.iter().map(|a| n as f64 + a).collect();
        return Ok((SequenceSpec::new(ks, ps, maps, MetricField::euclidean(n))?, vec![]));
    }
    let g = grid(cfg)?;
    let n = g.n();
    let bubbles = s
        .bubbles
        .iter()
        .map(|b| {
            let center = b.center.clone().unwrap_or_else(|| vec![0.0; n]);
            if center.len() != n {
                bail!("bubble center has {} components, grid has n = {n}", center.len());
            }
            let prototype = match b.prototype {
                PrototypeKind::ChartInverse => Prototype::chart_inverse(n),
                PrototypeKind::Antipodal => Prototype::antipodal(n),
            };
            Ok(SyntheticBubble {
                prototype,
                centers: vec![center; ks.len()],
                scales: ks.iter().map(|&k| b.base.powf(-b.power * k as f64)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let background = s.background.clone().unwrap_or_else(|| {
        let mut e = vec![0.0; n];
        e[n - 1] = 1.0;
        e
    });
    let min_scale = cfg.extract.min_scale_factor.unwrap_or(1.0);
    let seq = make_synthetic_sequence_with(
        g,
        &Background::Constant(background),
        &bubbles,
        &ks,
        &alphas,
        min_scale,
        s.superposition,
    )?;
    Ok((seq.spec, seq.warnings))
}

fn extract(cfg: &Config, out: &Path, identity: bool) -> Result<bool> {
    let (spec, warnings) = sequence(cfg)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let n = spec.n();
    let th = cfg.thresholds.build(n);
    let ec = cfg.extract.build(n, th.clone());
    let ext = extract_tree(&spec, &ec)?;
    let report = ExtractionReport::new(&ext);
    write(out, "defect.csv", &ext.ledger.defect_csv())?;
    if identity {
        let (lo, hi) = lambda_star_bounds(&ext.ledger, &th, n);
        let in_bounds = ext.records.iter().all(|r| r.lambda_star >= lo - 1e-9 && r.lambda_star <= hi);
        let rel = ext.ledger.relative_defect();
        write_json(
            out,
            &json!({
                "experiment": "verify-identity",
                "E_total": ext.ledger.e_total,
                "E_weak": ext.ledger.e_weak,
                "parts": ext.ledger.parts,
                "defect": ext.ledger.defect,
                "relative_defect": rel,
                "identity_tol": cfg.extract.identity_tol,
                "identity_holds": rel.abs() <= cfg.extract.identity_tol,
                "superadditive": ext.ledger.superadditive(cfg.extract.identity_tol),
                "lambda_star": ext.records.iter().map(|r| r.lambda_star).collect::<Vec<_>>(),
                "lambda_star_bounds": [lo, hi],
                "lambda_star_in_bounds": in_bounds,
                "per_k_defect": report.per_k_defect,
                "warnings": warnings,
                "incomplete": ext.incomplete,
            }),
        )?;
    } else {
        for (k, text) in profile_csvs(&spec, &ext) {
            if !ext.profiles.is_empty() && !ext.profiles[0].radii.is_empty() {
                write(out, &format!("profile_k{k}.csv"), &text)?;
            }
        }
        write(out, "report.json", &(report.to_json() + "\n"))?;
    }
    if ext.incomplete {
        log::warn!("INCOMPLETE: generation cap reached before the remainder stopped concentrating");
    }
    Ok(!ext.incomplete)
}

#[derive(Serialize)]
struct GapRow {
    trial: usize,
    initial_energy: f64,
    final_energy: f64,
    oscillation: f64,
    constant: bool,
}

fn gap_test(cfg: &Config, seed: u64, out: &Path) -> Result<bool> {
    let g = grid(cfg)?;
    let n = g.n();
    let metric = MetricField::euclidean(n);
    let th = cfg.thresholds.build(n);
    let bound = cfg.gap.fraction * (th.eps_b / 2.0).powi(n as i32);
    let sc = cfg.solver.build(n);
    let rows: Vec<GapRow> = (0..cfg.gap.trials)
        .into_par_iter()
        .map(|i| {
            let init = random_small_map(g.clone(), &metric, bound, &mut trial_rng(seed, i as u64))?;
            let initial_energy = p_energy(&init, &metric, n as f64)?.total;
            let (u, _) = minimize_free_boundary_with(&init, &metric, &sc, BoundaryMode::Free)?;
            let osc = oscillation(&u);
            Ok(GapRow {
                trial: i,
                initial_energy,
                final_energy: p_energy(&u, &metric, n as f64)?.total,
                oscillation: osc,
                constant: osc <= cfg.gap.oscillation_tol,
            })
        })
        .collect::<Result<_>>()?;
    let mut csv = csv::Writer::from_writer(vec![]);
    for r in &rows {
        csv.serialize(r)?;
    }
    write(out, "trials.csv", &String::from_utf8(csv.into_inner()?)?)?;
    write_json(
        out,
        &json!({
            "experiment": "gap-test",
            "energy_bound": bound,
            "eps_b": th.eps_b,
            "constant": rows.iter().all(|r| r.constant),
            "max_oscillation": rows.iter().map(|r| r.oscillation).fold(0.0, f64::max),
            "trials": rows,
        }),
    )?;
    Ok(true)
}

fn degrees(cfg: &Config, out: &Path) -> Result<bool> {
    let maps: Vec<(String, DiscreteMap)> = if let Some(paths) = cfg.input.maps.clone().or(cfg.input.map.clone().map(|p| vec![p])) {
        paths.iter().map(|p| Ok((p.display().to_string(), load(p)?))).collect::<Result<_>>()?
    } else {
        let (spec, _) = sequence(cfg)?;
        spec.ks.iter().map(|k| format!("k={k}")).zip(spec.maps).collect()
    };
    let rows = maps
        .iter()
        .map(|(label, m)| {
            let d = degree(m, BoundaryComponent::default_for(m))?;
            Ok(json!({"map": label, "degree": d.degree, "raw": d.raw}))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("map,degree,raw\n");
    for r in &rows {
        csv += &format!("{},{},{}\n", r["map"].as_str().unwrap_or_default(), r["degree"], r["raw"]);
    }
    write(out, "degree.csv", &csv)?;
    write_json(out, &json!({"experiment": "degree", "rows": rows}))?;
    Ok(true)
}

fn neck(cfg: &Config, out: &Path) -> Result<bool> {
    let nc = cfg.neck.as_ref().ok_or_else(|| anyhow!("missing [neck] section"))?;
    let n = cfg.grid.n;
    let center = nc.center.clone().unwrap_or_else(|| vec![0.0; n]);
    let spec = AnnulusSpec::new(center, nc.r1, nc.r2, false)?;
    let sc = cfg.solver.build(n);
    let report = if let Some(path) = &cfg.input.map {
        let u = load(path)?;
        let n = u.grid().n();
        let th = cfg.thresholds.build(n);
        let eps = nc.eps_star.unwrap_or(th.eps_b);
        let c = neck_comparison(&u, &spec, &MetricField::euclidean(n), eps, &sc)?;
        json!({"experiment": "neck", "mode": "comparison", "e_u": c.e_u, "e_v": c.e_v, "ratio": c.ratio})
    } else {
        let (a, b) = match (&nc.a, &nc.b) {
            (Some(a), Some(b)) => (a.clone(), b.clone()),
            _ => bail!("neck needs an input map or constant data a and b"),
        };
        if spec.center.iter().any(|&c| c != 0.0) {
            bail!("constant-data neck runs use an annulus centered at the origin");
        }
        let comp = ComparatorSpec::new(n, a.clone(), b.clone(), nc.r1, nc.r2, sc.p)?;
        let exact = comparator_energy(&comp);
        let quad = comparator_quadrature(&comp, cfg.grid.h)?;
        let prob = AnnulusProblem::constant(spec, &a, &b, cfg.grid.h, sc.p)?;
        let sol = annulus_extension(&prob, &sc)?;
        write(out, "convergence.csv", &sol.log.to_csv())?;
        json!({
            "experiment": "neck",
            "mode": "constant",
            "comparator_energy": exact,
            "comparator_quadrature": quad,
            "quadrature_relative_error": (quad - exact).abs() / exact,
            "extension_energy": sol.energy,
            "extension_over_comparator": sol.energy / exact,
        })
    };
    write_json(out, &report)?;
    Ok(true)
}
