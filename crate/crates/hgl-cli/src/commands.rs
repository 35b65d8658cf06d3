//! Subcommand pipelines. Each writes its CSV tables and snapshots through
//! [`Artifacts`] as it goes and returns the JSON payload of its report.

use serde_json::{json, Value};

use hgl_core::bounds::{deterministic_sweep, spectral_gap_bound_check, BoundCheck};
use hgl_core::corrector::{
    estimate_ahom, flux_divergence_norm, sigma_reconstruction_error, voigt_reuss, CorrectorOptions, CorrectorSet,
};
use hgl_core::fluctuation::{kappa_bound, mc_fluctuation, moment_scaling, FluctuationReport};
use hgl_core::greens::residual_study;
use hgl_core::hs::{estimate_k_tensor, KernelTensor};
use hgl_core::kernels::{gff_study, sigma_g_squared, sigma_tilde_g_squared, TestFunctionPair, VarianceQuadrature};
use hgl_core::solver::{apply_operator, green_column, green_source};
use hgl_core::stats::derive_seed;
use hgl_core::{Environment, HglError, Snapshot};

use crate::artifacts::{num, Artifacts};
use crate::config::ExperimentConfig;

pub enum RunError {
    Config(String),
    Core(HglError),
}

impl From<HglError> for RunError {
    fn from(e: HglError) -> Self {
        RunError::Core(e)
    }
}

type Run = Result<Value, RunError>;

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

pub const SUBCOMMANDS: &[&str] =
    &["sample-env", "solve", "corrector", "estimate-k", "kernel", "fluctuate", "verify-bounds", "gff", "residual"];

pub fn dispatch(name: &str, cfg: &ExperimentConfig, out: &mut Artifacts) -> Run {
    match name {
        "sample-env" => sample_env(cfg, out),
        "solve" => solve(cfg, out),
        "corrector" => corrector(cfg, out),
        "estimate-k" => estimate_k(cfg, out),
        "kernel" => kernel(cfg, out),
        "fluctuate" => fluctuate(cfg, out),
        "verify-bounds" => verify_bounds(cfg, out),
        "gff" => gff(cfg, out),
        "residual" => residual(cfg, out),
        other => Err(RunError::Config(format!("unknown subcommand `{other}`"))),
    }
}

fn geometry(cfg: &ExperimentConfig) -> Result<hgl_core::LatticeGeometry, RunError> {
    cfg.geometry.build().map_err(|e| RunError::Config(e.0))
}

fn sample_env(cfg: &ExperimentConfig, out: &mut Artifacts) -> Run {
    let geom = geometry(cfg)?;
    let c = &cfg.sample_env;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for k in 0..c.count {
        let seed = derive_seed(c.seed, k as u64);
        out.seed(&format!("env/{k}"), seed);
        let env = Environment::sample(&geom, cfg.law, seed);
        let snap = Snapshot::from_environment(&env);
        let name = format!("env_{k}.hgl");
        out.snapshot(&name, &snap)?;
        if Snapshot::load(&out_path(out, &name))?.to_environment()? != env {
            out.violation(format!("snapshot {name} does not round-trip"));
        }
        let z = env.zeta();
        let a = env.conductances();
        let n = z.len() as f64;
        let zm = z.iter().sum::<f64>() / n;
        let zv = z.iter().map(|v| (v - zm) * (v - zm)).sum::<f64>() / (n - 1.0).max(1.0);
        let (amin, amax) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let amean = a.iter().sum::<f64>() / n;
        if amin < cfg.law.c_min() || amax > cfg.law.c_max() {
            out.violation(format!("environment {k}: conductances outside the law bounds"));
        }
        rows.push(vec![k.to_string(), seed.to_string(), z.len().to_string(), num(zm), num(zv), num(amin), num(amax), num(amean)]);
        summaries.push(json!({"index": k, "seed": seed, "file": name, "zeta_mean": zm, "zeta_variance": zv, "a_min": amin, "a_max": amax, "a_mean": amean}));
    }
    out.csv("environments.csv", &["index", "seed", "edges", "zeta_mean", "zeta_variance", "a_min", "a_max", "a_mean"], &rows)?;
    out.lap("sample");
    Ok(json!({"geometry": geom, "law": cfg.law, "environments": summaries}))
}

fn out_path(out: &Artifacts, name: &str) -> std::path::PathBuf {
    out.dir().join(name)
}

fn solve(cfg: &ExperimentConfig, out: &mut Artifacts) -> Run {
    let geom = geometry(cfg)?;
    let c = &cfg.solve;
    let source = match &c.source {
        Some(s) => s.clone(),
        None if geom.is_periodic() => vec![0; geom.d()],
        None => geom.shape().iter().map(|&l| (l as i64 - 1) / 2).collect(),
    };
    let y = geom.site_index(&source).ok_or_else(|| RunError::Config(format!("source {source:?} outside the geometry")))?;
    out.seed("environment", c.seed);
    let env = Environment::sample(&geom, cfg.law, c.seed);
    let a = env.conductances();
    let col = green_column(&geom, &a, c.lambda, y, &cfg.solver)?;
    out.lap("solve");
    let rhs = green_source(&geom, c.lambda, y);
    let applied = apply_operator(&geom, &a, c.lambda, &col.values)?;
    let num_r = applied.iter().zip(&rhs).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let residual = num_r / rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if residual > 10.0 * cfg.solver.rel_tol {
        out.violation(format!("relative residual {residual:e} above ten times the tolerance"));
    }
    let d = geom.d();
    let rows: Vec<Vec<String>> = (0..geom.n_sites())
        .map(|i| {
            let mut r: Vec<String> = geom.site_coords(i).iter().map(|v| v.to_string()).collect();
            r.push(num(col.values[i]));
            r
        })
        .collect();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("green".into());
    out.csv("green.csv", &header.iter().map(|s| s.as_str()).collect::<Vec<_>>(), &rows)?;
    out.snapshot("environment.hgl", &Snapshot::from_environment(&env))?;
    Ok(json!({"geometry": geom, "law": cfg.law, "lambda": c.lambda, "source": source, "residual": residual, "value_at_source": col.values[y]}))
}

fn corrector(cfg: &ExperimentConfig, out: &mut Artifacts) -> Run {
    let geom = geometry(cfg)?;
    if !geom.is_periodic() {
        return Err(RunError::Config("correctors need a periodic geometry".into()));
    }
    let c = &cfg.corrector;
    let d = geom.d();
    let opts = CorrectorOptions { lambda: c.lambda, with_sigma: c.with_sigma, solver: cfg.solver, ..Default::default() };
    let mut a_rows = Vec::new();
    let mut check_rows = Vec::new();
    let mut per_env = Vec::new();
    let mut a_homs = Vec::new();
    for k in 0..c.n_env {
        let seed = derive_seed(c.seed, k as u64);
        out.seed(&format!("env/{k}"), seed);
        let env = Environment::sample(&geom, cfg.law, seed);
        let set = match CorrectorSet::compute(&env, &opts) {
            Ok(s) => s,
            Err(e) => {
                // keep the tables of the environments already done
                write_corrector_tables(out, &a_rows, &check_rows)?;
                return Err(e.into());
            }
        };
        let resid = set.residuals.iter().cloned().fold(0.0, f64::max);
        let div = (0..d).map(|i| flux_divergence_norm(&geom, &set.q, i)).fold(0.0, f64::max);
        let (voigt, reuss) = voigt_reuss(&env);
        let bracketed = (0..d).all(|i| set.a_hom[i][i] <= voigt[i] * (1.0 + 1e-9) && set.a_hom[i][i] >= reuss[i] * (1.0 - 1e-9));
        let max_phi = set.phi.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let (mut recon, mut mean_adj, mut antisym, mut max_sigma) = (0.0f64, 0.0f64, true, 0.0f64);
        if let Some(sigma) = &set.sigma {
            for i in 0..d {
                for j in 0..d {
                    let (e, m) = sigma_reconstruction_error(&geom, &set.q, sigma, i, j);
                    recon = recon.max(e);
                    mean_adj = mean_adj.max(m);
                    for kk in 0..d {
                        antisym &= sigma[i][j][kk].iter().zip(&sigma[i][kk][j]).all(|(x, y)| *x == -*y);
                        max_sigma = sigma[i][j][kk].iter().fold(max_sigma, |m, v| m.max(v.abs()));
                    }
                }
            }
        }
        if c.lambda == 0.0 && resid > c.check_tol {
            out.violation(format!("environment {k}: corrector residual {resid:e}"));
        }
        if c.lambda == 0.0 && div > c.check_tol {
            out.violation(format!("environment {k}: flux divergence {div:e}"));
        }
        if c.lambda == 0.0 && !bracketed {
            out.violation(format!("environment {k}: a_h outside the Voigt-Reuss bracket"));
        }
        if !antisym {
            out.violation(format!("environment {k}: sigma not antisymmetric"));
        }
        if c.lambda == 0.0 && recon > c.check_tol {
            out.violation(format!("environment {k}: sigma reconstruction error {recon:e}"));
        }
        for i in 0..d {
            for j in 0..d {
                a_rows.push(vec![k.to_string(), seed.to_string(), i.to_string(), j.to_string(), num(set.a_hom[i][j])]);
            }
        }
        check_rows.push(vec![
            k.to_string(),
            num(resid),
            num(div),
            num(recon),
            num(mean_adj),
            antisym.to_string(),
            bracketed.to_string(),
            num(max_phi),
            num(max_sigma),
        ]);
        if c.snapshots {
            out.snapshot(&format!("corrector_{k}.hgl"), &Snapshot::from_corrector(&env, &set))?;
        }
        per_env.push(json!({
            "index": k, "seed": seed, "a_hom": set.a_hom, "residuals": set.residuals, "iterations": set.iterations,
            "flux_divergence": div, "sigma_reconstruction": recon, "flux_mean_adjustment": mean_adj,
            "sigma_antisymmetric": antisym, "voigt": voigt, "reuss": reuss, "max_abs_phi": max_phi, "max_abs_sigma": max_sigma,
        }));
        a_homs.push(set.a_hom);
    }
    write_corrector_tables(out, &a_rows, &check_rows)?;
    out.lap("correctors");
    Ok(json!({"geometry": geom, "law": cfg.law, "lambda": c.lambda, "a_hom": estimate_ahom(&a_homs), "environments": per_env}))
}

fn write_corrector_tables(out: &mut Artifacts, a_rows: &[Vec<String>], check_rows: &[Vec<String>]) -> Result<(), HglError> {
    out.csv("a_hom.csv", &["env", "seed", "i", "j", "value"], a_rows)?;
    out.csv(
        "checks.csv",
        &["env", "residual", "flux_divergence", "sigma_reconstruction", "flux_mean_adjustment", "sigma_antisymmetric", "voigt_reuss", "max_abs_phi", "max_abs_sigma"],
        check_rows,
    )
}

fn kernel_rows(k: &KernelTensor) -> Vec<Vec<String>> {
    let d = k.d;
    let mut rows = Vec::new();
    for i in 0..d {
        for j in 0..d {
            for kk in 0..d {
                for l in 0..d {
                    rows.push(vec![i.to_string(), j.to_string(), kk.to_string(), l.to_string(), num(k.get(i, j, kk, l)), num(k.get_se(i, j, kk, l))]);
                }
            }
        }
    }
    rows
}

fn write_kernel(out: &mut Artifacts, name: &str, k: &KernelTensor) -> Result<(), HglError> {
    out.csv(name, &["i", "j", "k", "l", "value", "se"], &kernel_rows(k))
}

fn estimate_k(cfg: &ExperimentConfig, out: &mut Artifacts) -> Run {
    let kc = &cfg.estimate_k;
    out.seed("kernel", kc.seed);
    let k = estimate_k_tensor(kc)?;
    out.lap("estimate");
    write_kernel(out, "kernel.csv", &k)?;
    Ok(json!({
        "config": kc, "tensor": k, "pair_swap_z": k.pair_swap_z(), "cubic_symmetry_z": k.cubic_symmetry_z(),
        "min_eigenvalue": k.min_eigenvalue(),
    }))
}

fn quadrature_rows(items: &[(&str, &VarianceQuadrature)]) -> Vec<Vec<String>> {
    items
        .iter()
        .map(|(name, q)| {
            vec![
                name.to_string(),
                num(q.sigma2),
                num(q.fine),
                num(q.coarse),
                num(q.richardson_error),
                num(q.tail),
                num(q.tail_error),
                num(q.error),
                num(q.relative_error()),
            ]
        })
        .collect()
}

const QUADRATURE_HEADER: &[&str] = &["quantity", "value", "fine", "coarse", "richardson_error", "tail", "tail_error", "error", "relative_error"];

fn load_tensor(path: &std::path::Path) -> Result<KernelTensor, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    let t = v.get("data").and_then(|d| d.get("tensor")).ok_or_else(|| RunError::Config("report has no tensor".into()))?;
    serde_json::from_value(t.clone()).map_err(|e| RunError::Config(format!("tensor: {e}")))
}

fn kernel(cfg: &ExperimentConfig, out: &mut Artifacts) -> Run {
    let c = &cfg.kernel;
    let k = match &c.k_report {
        Some(p) => load_tensor(p)?,
        None => {
            out.seed("kernel", c.kernel.seed);
            let k = estimate_k_tensor(&c.kernel)?;
            write_kernel(out, "kernel.csv", &k)?;
            k
        }
    };
    out.lap("tensor");
    let a_bar = c
        .a_bar
        .or_else(|| k.a_hom.as_ref().map(|a| a.a_bar()))
        .ok_or_else(|| RunError::Config("no a_bar: the tensor carries no a_h and none is configured".into()))?;
    let pair = TestFunctionPair { f: c.f.clone(), g: c.g.clone() };
    let s = sigma_g_squared(&k, a_bar, &pair, &c.quadrature)?;
    let st = sigma_tilde_g_squared(&k, a_bar, &pair, &c.quadrature)?;
    out.lap("quadrature");
    out.csv("quadrature.csv", QUADRATURE_HEADER, &quadrature_rows(&[("sigma_g2", &s), ("sigma_tilde_g2", &st)]))?;
    let gap = s.sigma2 - st.sigma2;
    Ok(json!({
        "a_bar": a_bar, "pair": pair, "sigma_g2": s, "sigma_tilde_g2": st,
        "difference": gap, "difference_over_error": gap.abs() / (s.error + st.error),
    }))
}

fn fluctuate(cfg: &ExperimentConfig, out: &mut Artifacts) -> Run {
    let c = &cfg.fluctuate;
    let mut mc = c.mc.clone();
    let mut kappa_cfg = c.kappa.clone();
    let mut moment_cfg = c.moments.clone();
    if let Some(pad) = cfg.geometry.pad {
        mc.observable.pad = pad;
        kappa_cfg.observable.pad = pad;
        moment_cfg.observable.pad = pad;
    }
    if mc.pair.f.d() < 3 || (c.with_kappa && kappa_cfg.pair.f.d() < 3) || (c.with_moments && moment_cfg.f.d() < 3) {
        return Err(RunError::Config("fluctuation experiments need d >= 3".into()));
    }
    let (sigma, sigma_tilde) = if c.with_sigma {
        out.seed("kernel", c.kernel.seed);
        let k = estimate_k_tensor(&c.kernel)?;
        write_kernel(out, "kernel.csv", &k)?;
        let a_bar = mc.a_bar.or_else(|| k.a_hom.as_ref().map(|a| a.a_bar()));
        let a_bar = a_bar.ok_or_else(|| RunError::Config("no a_bar available".into()))?;
        mc.a_bar.get_or_insert(a_bar);
        let s = sigma_g_squared(&k, a_bar, &mc.pair, &c.quadrature)?;
        let st = sigma_tilde_g_squared(&k, a_bar, &mc.pair, &c.quadrature)?;
        out.csv("quadrature.csv", QUADRATURE_HEADER, &quadrature_rows(&[("sigma_g2", &s), ("sigma_tilde_g2", &st)]))?;
        out.lap("sigma");
        (Some(s), Some(st))
    } else {
        (None, None)
    };
    if !mc.corrector_eps.is_empty() && mc.a_bar.is_none() {
        return Err(RunError::Config("corrector_eps needs fluctuate.mc.a_bar or with_sigma".into()));
    }
    for j in 0..mc.eps.len() {
        out.seed(&format!("mc/eps{j}"), derive_seed(mc.seed, j as u64));
    }
    let mut report: FluctuationReport = mc_fluctuation(&mc)?;
    out.lap("monte-carlo");
    report.sigma2 = sigma;
    report.sigma_tilde2 = sigma_tilde;
    write_samples(out, &report)?;
    if c.with_kappa {
        out.seed("kappa", kappa_cfg.seed);
        let k = kappa_bound(&kappa_cfg)?;
        out.lap("kappa");
        let rows: Vec<Vec<String>> = k
            .rows
            .iter()
            .map(|r| {
                vec![
                    num(r.eps),
                    r.side.to_string(),
                    r.n_env.to_string(),
                    r.n_edges.to_string(),
                    num(r.kappa2.value),
                    num(r.kappa2.se),
                    num(r.variance.value),
                    num(r.variance.se),
                    num(r.ratio),
                    num(r.rate),
                    r.doubling_z().map(num).unwrap_or_default(),
                ]
            })
            .collect();
        out.csv("kappa.csv", &["eps", "side", "n_env", "n_edges", "kappa2", "kappa2_se", "variance", "variance_se", "ratio", "rate", "doubling_z"], &rows)?;
        report.kappa = Some(k);
    }
    if c.with_moments {
        out.seed("moments", moment_cfg.seed);
        let m = moment_scaling(&moment_cfg)?;
        out.lap("moments");
        let rows: Vec<Vec<String>> = m.rows.iter().map(|r| vec![num(r.lambda), num(r.p), num(r.moment)]).collect();
        out.csv("moments.csv", &["lambda", "p", "moment"], &rows)?;
        report.moments = Some(m);
    }
    let gaps = report.relative_gaps();
    let decreasing = report.gaps_decreasing();
    let mut v = to_value(&report);
    v["relative_gaps"] = to_value(&gaps);
    v["gaps_decreasing"] = to_value(&decreasing);
    Ok(v)
}

fn write_samples(out: &mut Artifacts, r: &FluctuationReport) -> Result<(), HglError> {
    let mut rows = Vec::new();
    for row in &r.rows {
        for (k, ((seed, v), s)) in row.seeds.iter().zip(&row.samples).zip(&row.standardized).enumerate() {
            rows.push(vec![num(row.eps), k.to_string(), seed.to_string(), num(*v), num(*s)]);
        }
    }
    out.csv("samples.csv", &["eps", "index", "seed", "value", "standardized"], &rows)?;
    let summary: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|row| {
            let (cv, cs, dv, ds) = match &row.corrector {
                Some(c) => (num(c.rescaled.value), num(c.rescaled.se), num(c.difference.value), num(c.difference.se)),
                None => Default::default(),
            };
            vec![
                num(row.eps),
                row.side.to_string(),
                row.n.to_string(),
                row.failures.to_string(),
                num(row.mean.value),
                num(row.mean.se),
                num(row.variance.value),
                num(row.variance.se),
                num(row.rescaled.value),
                num(row.rescaled.se),
                num(row.ks_statistic),
                num(row.ks_p),
                cv,
                cs,
                dv,
                ds,
            ]
        })
        .collect();
    out.csv(
        "fluctuation.csv",
        &[
            "eps",
            "side",
            "n",
            "failures",
            "mean",
            "mean_se",
            "variance",
            "variance_se",
            "rescaled",
            "rescaled_se",
            "ks_statistic",
            "ks_p",
            "corrector_rescaled",
            "corrector_rescaled_se",
            "difference",
            "difference_se",
        ],
        &summary,
    )
}

fn verify_bounds(cfg: &ExperimentConfig, out: &mut Artifacts) -> Run {
    let c = &cfg.bounds;
    out.seed("spectral-gap", c.seed);
    let mut checks = deterministic_sweep(c.max_constant)?;
    checks.push(spectral_gap_bound_check(c.sg_samples, c.seed, c.max_constant)?);
    out.lap("sweep");
    let rows: Vec<Vec<String>> =
        checks.iter().flat_map(|c| c.csv_rows()).map(|r| split_csv_line(&r)).collect();
    out.csv("bounds.csv", &BoundCheck::csv_header().split(',').collect::<Vec<_>>(), &rows)?;
    for ch in checks.iter().filter(|c| !c.pass) {
        out.violation(format!("{} {}: C = {:.3}, doubled {:.3}", ch.name, ch.params, ch.constant, ch.constant_doubled));
    }
    let summary: Vec<Value> = checks
        .iter()
        .map(|c| json!({"name": c.name, "params": c.params, "constant": c.constant, "constant_doubled": c.constant_doubled, "drift": c.drift(), "spread": c.spread(), "pass": c.pass}))
        .collect();
    Ok(json!({"max_constant": c.max_constant, "summary": summary, "checks": checks}))
}

/// Splits one of the bound table's lines, which quote only the params field.
fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    for ch in line.chars() {
        match ch {
            '"' => quoted = !quoted,
            ',' if !quoted => out.push(std::mem::take(&mut cur)),
            _ => cur.push(ch),
        }
    }
    out.push(cur);
    out
}

fn gff(cfg: &ExperimentConfig, out: &mut Artifacts) -> Run {
    let c = &cfg.gff;
    out.seed("gff", c.seed);
    let r = gff_study(c)?;
    out.lap("gff");
    let rows: Vec<Vec<String>> = r
        .two_point
        .iter()
        .map(|t| vec![num(t.distance), t.lattice_distance.to_string(), num(t.quadrature), num(t.sampled.value), num(t.sampled.se), num(t.finite_volume_correction), num(t.z)])
        .collect();
    out.csv("two_point.csv", &["distance", "lattice_distance", "quadrature", "sampled", "sampled_se", "finite_volume_correction", "z"], &rows)?;
    let rows: Vec<Vec<String>> = r.box_variance.iter().map(|b| vec![b.side.to_string(), num(b.variance.value), num(b.variance.se)]).collect();
    out.csv("box_variance.csv", &["side", "variance", "variance_se"], &rows)?;
    Ok(to_value(&r))
}

fn residual(cfg: &ExperimentConfig, out: &mut Artifacts) -> Run {
    let c = &cfg.residual;
    out.seed("residual", c.seed);
    let r = residual_study(c)?;
    out.lap("residual");
    let mut rows: Vec<_> = r.rows.iter().collect();
    rows.sort_by_key(|row| row.radius);
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            vec![
                row.radius.to_string(),
                num(row.residual.value),
                num(row.residual.se),
                num(row.grad_g.value),
                num(row.grad_g.se),
                num(row.grad_gh.value),
                num(row.grad_gh.se),
                num(row.corrector_term.value),
                num(row.corrector_term.se),
                num(row.continuum_gap),
            ]
        })
        .collect();
    out.csv(
        "residual.csv",
        &["radius", "residual", "residual_se", "grad_g", "grad_g_se", "grad_gh", "grad_gh_se", "corrector_term", "corrector_term_se", "continuum_gap"],
        &rows,
    )?;
    Ok(to_value(&r))
}
