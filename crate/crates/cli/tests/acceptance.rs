//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines are
//! always printed.

// `ensure!` negates comparisons so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ressqu::archs::{self, ids, ArchConfig, REFERENCE_FIRES};
use ressqu::datasets::{self, Dataset};
use ressqu::gradcheck::{miniature_setup, rel_err};
use ressqu::graph::{backward, forward_single, param_count, LossSeeds, NodeParams, ParamGroup};
use ressqu::ops::Mode;
use ressqu::supervision::{recommend, AlphaSchedule, GradientProbeReport};
use ressqu::trainer::{init_params, InitSpec};
use ressqu::{Real, Shape, Tensor};
use ressqu_cli::{run, Summary, EXIT_OK};

const LN5: f64 = 1.6094379124341003;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("ressqu").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).expect("utf-8 stdout"),
        String::from_utf8(err).expect("utf-8 stderr"),
    )
}

fn cli_ok(args: &[&str]) -> Result<String, String> {
    let (code, out, err) = cli(args);
    ensure!(code == EXIT_OK, "`{}` exited {code}: {err}", args.join(" "));
    Ok(out)
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn pct_in(text: &str, suffix: &str) -> Option<f64> {
    let line = text.lines().find(|l| l.contains(suffix))?;
    let num = line.split_whitespace().find(|w| w.ends_with('%'))?;
    num.trim_end_matches('%').parse().ok()
}

fn comparison_arithmetic() -> Outcome {
    let out = cli_ok(&[
        "compare", "--left-size", "14", "--left-hours", "45", "--right-size", "1.73", "--right-hours", "39",
    ])?;
    let size = pct_in(&out, "smaller").ok_or("no size line")?;
    let time = pct_in(&out, "faster").ok_or("no duration line")?;
    ensure!((size - 87.64).abs() <= 0.01, "size reduction {size}");
    ensure!((time - 13.33).abs() <= 0.01, "duration reduction {time}");
    Ok(format!("{size:.2}% smaller, {time:.2}% faster"))
}

fn structural_conformance() -> Outcome {
    let out = cli_ok(&["summarize", "--format", "json"])?;
    let s: Summary = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    let rows: Vec<(usize, usize, usize)> = s.report.fire_rows().iter().map(|(_, f)| (f.s1, f.e1, f.e3)).collect();
    ensure!(rows == REFERENCE_FIRES, "fire rows {rows:?}");
    ensure!(s.main_weight_sets.len() == 11, "main weight sets {:?}", s.main_weight_sets);
    ensure!(s.branch_weight_sets.len() == 4, "branch weight sets {:?}", s.branch_weight_sets);
    ensure!(s.aux_tap.as_deref() == Some(ids::AUX_TAP), "aux tap {:?}", s.aux_tap);
    let taps = s.report.nodes.iter().filter(|n| n.name.starts_with("aux/pool")).count();
    ensure!(taps == 1, "{taps} auxiliary taps");
    ensure!(s.residual_additions.len() == 3, "{} residual additions", s.residual_additions.len());
    for r in &s.residual_additions {
        ensure!(r.shapes[0] == r.shapes[1], "{} adds {:?}", r.node, r.shapes);
    }
    Ok(format!(
        "7 fire rows, {} main + {} branch weight sets, tap {}, 3 shape-equal additions",
        s.main_weight_sets.len(),
        s.branch_weight_sets.len(),
        ids::AUX_TAP
    ))
}

fn compression_direction() -> Outcome {
    // Counting script: weights only, from the fire table and the input
    // width each fire sees.
    let mut cin = 96;
    let mut worst = f64::INFINITY;
    let mut fire3 = (0, 0);
    for (i, &(s1, e1, e3)) in REFERENCE_FIRES.iter().enumerate() {
        let fire = cin * s1 + s1 * e1 + s1 * e3 * 9;
        let plain = cin * (e1 + e3) * 9;
        if i == 2 {
            fire3 = (fire, plain);
        }
        worst = worst.min(plain as f64 / fire as f64);
        cin = e1 + e3;
    }
    ensure!(fire3 == (49_152, 589_824), "fire3 counts {fire3:?}");
    ensure!(worst >= 5.0, "smallest per-fire reduction {worst:.2}x");

    let cfg = ArchConfig::reference();
    let ours = param_count(&archs::build_res_squ_cnds(&cfg).map_err(|e| e.to_string())?);
    let base = param_count(&archs::build_plain_baseline(&cfg).map_err(|e| e.to_string())?);
    let built = |p: &ressqu::graph::ParamCount, id: &str| p.node(id).map_or(0, |n| n.weights);
    let built_fire3: usize = ["fire3/squeeze1x1", "fire3/expand1x1", "fire3/expand3x3"]
        .iter()
        .map(|id| built(&ours, id))
        .sum();
    ensure!(built_fire3 == 49_152, "built fire3 weights {built_fire3}");
    ensure!(built(&base, "fire3/conv3x3") == 589_824, "built baseline fire3");
    ensure!(ours.total < base.total, "{} >= {}", ours.total, base.total);
    Ok(format!(
        "total {} < baseline {}; fire3 49152 vs 589824 ({:.1}x); min per-fire {:.2}x",
        ours.total,
        base.total,
        589_824.0 / 49_152.0,
        worst
    ))
}

fn gradient_correctness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = dir.path().join("gradcheck.json");
    cli_ok(&["gradcheck", "--scale", "tiny", "--seed", "0", "--tolerance", "1e-3", "--out", path_str(&report)])?;
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let results = v["results"].as_array().ok_or("no results")?;
    let mut prim: f64 = 0.0;
    let mut net = f64::NAN;
    for r in results {
        let err = r["max_rel_err"].as_f64().ok_or("bad entry")?;
        if r["name"].as_str().unwrap_or("").starts_with("network") {
            net = err;
        } else {
            prim = prim.max(err);
        }
    }
    ensure!(prim <= 1e-4, "primitive max rel err {prim:e}");
    ensure!(net <= 1e-3, "network max rel err {net:e}");
    let (code, _, _) = cli(&["gradcheck", "--inject-fault"]);
    ensure!(code != EXIT_OK, "injected fault went unnoticed");
    let (code, _, _) = cli(&["gradcheck", "--tolerance", "0"]);
    ensure!(code != EXIT_OK, "zero tolerance passed");
    Ok(format!("primitives {prim:.2e} <= 1e-4, miniature network {net:.2e} <= 1e-3, fault and zero tolerance caught"))
}

fn shared_grads(seeds: &[(&str, f64)]) -> Result<Vec<f64>, String> {
    let (g, mut p, x, labels) = miniature_setup(17).map_err(|e| e.to_string())?;
    let seeds: LossSeeds = seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    p.zero_grads();
    let pass = forward_single(&g, &p, &x, Mode::Train, 17).map_err(|e| e.to_string())?;
    backward(&g, &mut p, &pass, &labels, &seeds).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for (id, np) in p.iter() {
        if g.node(id).and_then(|n| n.group) == Some(ParamGroup::Main) {
            for (_, t) in np.tensors() {
                out.extend_from_slice(t.grad().unwrap_or(&[]));
            }
        }
    }
    Ok(out)
}

fn supervision_linearity() -> Outcome {
    let alpha = 0.3;
    let both = shared_grads(&[(ids::MAIN_LOSS, 1.0), (ids::AUX_LOSS, alpha)])?;
    let main = shared_grads(&[(ids::MAIN_LOSS, 1.0)])?;
    let branch = shared_grads(&[(ids::AUX_LOSS, 1.0)])?;
    let live = branch.iter().filter(|v| **v != 0.0).count();
    ensure!(live > 0, "branch loss reaches no shared parameter");
    let worst = both
        .iter()
        .zip(main.iter().zip(&branch))
        .map(|(&t, (&m, &b))| rel_err(t, m + alpha * b))
        .fold(0.0, f64::max);
    ensure!(worst <= 1e-10, "max rel err {worst:e}");
    Ok(format!("{} shared values ({live} reached by the branch), max rel err {worst:.1e}", both.len()))
}

fn alpha_schedule() -> Outcome {
    for (a0, n) in [(0.3, 50usize), (1.0, 10), (0.7, 4), (0.3, 1)] {
        let s = AlphaSchedule::new(a0, n).map_err(|e| e.to_string())?;
        let at = |t| s.alpha_at(t).map_err(|e| e.to_string());
        ensure!(at(0)? == a0, "alpha_at(0) = {}", at(0)?);
        ensure!(at(n)? == 0.0, "alpha_at(N) = {}", at(n)?);
        if n % 2 == 0 {
            ensure!(at(n / 2)? == a0 / 2.0, "midpoint {}", at(n / 2)?);
        }
        for t in 1..=n {
            ensure!(at(t)? <= at(t - 1)?, "increase at t={t}");
        }
    }
    Ok("endpoints 0.3 -> 0, midpoint 0.15 at t=25 of 50, nonincreasing".into())
}

fn residual_identity_for<T: Real>(cfg: &ArchConfig) -> Result<usize, String> {
    let g = archs::build_res_squ_cnds(cfg).map_err(|e| e.to_string())?;
    let mut p = init_params::<T>(&g, &InitSpec::default(), 5).map_err(|e| e.to_string())?;
    for (id, np) in p.iter_mut() {
        if (id.starts_with("fire6/") || id.starts_with("fire7/")) && matches!(np, NodeParams::Conv { .. }) {
            for (_, t) in np.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
    let Some(NodeParams::Conv { weight, bias }) = p.get_mut("stage3/projection") else {
        return Err("stage3 has no projection".into());
    };
    let c = weight.shape().n;
    for (k, v) in weight.data_mut().iter_mut().enumerate() {
        *v = if k / c == k % c { T::one() } else { T::zero() };
    }
    bias.data_mut().iter_mut().for_each(|v| *v = T::zero());
    let s = cfg.input_size;
    let x = Tensor::from_fn(Shape::new(1, 3, s, s), |i| T::of(((i * 7919) % 257) as f64 / 128.0 - 1.0));
    let pass = forward_single(&g, &p, &x, Mode::Infer, 0).map_err(|e| e.to_string())?;
    let pooled = pass.value(&g, "pool4").ok_or("no pool4")?;
    let out = pass.value(&g, "stage3/add").ok_or("no stage3/add")?;
    ensure!(pooled.shape() == out.shape(), "{} vs {}", pooled.shape(), out.shape());
    ensure!(pooled.data().iter().any(|v| *v != T::zero()), "pooled input is all zero");
    let differing = pooled
        .data()
        .iter()
        .zip(out.data())
        .filter(|(a, b)| a.as_f64().to_bits() != b.as_f64().to_bits())
        .count();
    ensure!(differing == 0, "{differing} values differ bitwise");
    Ok(pooled.len())
}

fn residual_identity() -> Outcome {
    let full = residual_identity_for::<f32>(&ArchConfig::reference())?;
    let desk = residual_identity_for::<f64>(&ArchConfig::desk(5, 64))?;
    Ok(format!("stage3 output == pool4 bitwise ({full} values f32 reference config, {desk} values f64 desk config)"))
}

fn desk_learning() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("desk.rsq");
    let run_dir = dir.path().join("run");
    cli_ok(&["gen-data", "--classes", "5", "--per-class", "320", "--size", "3x64x64", "--noise", "0.1", "--seed", "7", "--out", path_str(&data)])?;
    cli_ok(&[
        "train", "--dataset", path_str(&data), "--preset", "desk", "--epochs", "1", "--batch", "8", "--lr", "0.01",
        "--alpha0", "0.3", "--seed", "7", "--out-dir", path_str(&run_dir),
    ])?;
    let mut rdr = csv_rows(&run_dir.join("metrics.csv"))?;
    ensure!(rdr.len() == 200, "{} steps logged", rdr.len());
    rdr.sort_by_key(|r| r.0);
    let mean = |rows: &[(usize, f64, f64, f64)]| rows.iter().map(|r| r.3).sum::<f64>() / rows.len() as f64;
    let first = mean(&rdr[..10]);
    let last = mean(&rdr[190..]);
    let (l0, ls) = (rdr[0].1, rdr[0].2);
    ensure!((l0 - LN5).abs() <= 0.01 * LN5, "initial L0 {l0}");
    ensure!((ls - LN5).abs() <= 0.01 * LN5, "initial Ls {ls}");
    let ratio = last / first;
    ensure!(ratio <= 0.5, "smoothed loss ratio {ratio:.3} ({first:.4} -> {last:.4})");
    Ok(format!("L0 {l0:.4}, Ls {ls:.4} at step 1; total loss {first:.4} -> {last:.4} (ratio {ratio:.3})"))
}

fn csv_rows(path: &Path) -> Result<Vec<(usize, f64, f64, f64)>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("no column {name}"));
    let (step, l0, ls, total) = (col("step")?, col("l0")?, col("ls")?, col("total")?);
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f[i].parse::<f64>().map_err(|e| e.to_string());
            Ok((num(step)? as usize, num(l0)?, num(ls)?, num(total)?))
        })
        .collect()
}

fn placement_probe() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli_ok(&["probe", "--depth", "12", "--epochs", "10", "--threshold", "1e-7", "--seed", "3", "--out", path_str(dir.path())])?;
    let text = std::fs::read_to_string(dir.path().join("probe.json")).map_err(|e| e.to_string())?;
    let r: GradientProbeReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure!(r.layers.len() == 12, "{} layers", r.layers.len());
    ensure!(r.shallow_mean <= r.deep_mean, "shallow {:e} > deep {:e}", r.shallow_mean, r.deep_mean);
    let means: Vec<f64> = r.layers.iter().map(|l| l.mean_abs_grad).collect();
    let expected = recommend(&means, 1e-7).map(|i| r.layers[i].layer.clone());
    ensure!(r.recommended == expected, "recommended {:?}, rule gives {expected:?}", r.recommended);
    ensure!(r.recommended.is_some(), "no recommendation");
    for l in &r.layers {
        ensure!(l.below_threshold == (l.mean_abs_grad < 1e-7), "{} flag", l.layer);
    }
    Ok(format!(
        "shallow {:.2e} <= deep {:.2e}; recommends {}",
        r.shallow_mean,
        r.deep_mean,
        r.recommended.unwrap_or_default()
    ))
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("inside dir").display().to_string();
                out.push((rel, std::fs::read(&p).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_formats() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n);
    for n in ["a.rsq", "b.rsq"] {
        cli_ok(&["gen-data", "--classes", "5", "--per-class", "4", "--size", "3x64x64", "--seed", "11", "--out", path_str(&p(n))])?;
    }
    let a = std::fs::read(p("a.rsq")).map_err(|e| e.to_string())?;
    ensure!(a == std::fs::read(p("b.rsq")).map_err(|e| e.to_string())?, "gen-data differs");

    for run_dir in ["t1", "t2"] {
        cli_ok(&["train", "--dataset", path_str(&p("a.rsq")), "--epochs", "2", "--seed", "11", "--out-dir", path_str(&p(run_dir))])?;
    }
    let (t1, t2) = (tree_bytes(&p("t1")), tree_bytes(&p("t2")));
    ensure!(t1.len() >= 6, "train wrote {} files", t1.len());
    ensure!(t1 == t2, "train artifacts differ");

    for probe_dir in ["p1", "p2"] {
        cli_ok(&[
            "probe", "--depth", "4", "--width", "4", "--per-class", "4", "--size", "1x16x16", "--seed", "11", "--out",
            path_str(&p(probe_dir)),
        ])?;
    }
    ensure!(tree_bytes(&p("p1")) == tree_bytes(&p("p2")), "probe artifacts differ");

    let d = Dataset::from_bytes(&a, &p("a.rsq")).map_err(|e| e.to_string())?;
    ensure!(d.to_bytes().map_err(|e| e.to_string())? == a, "RSQ1 round trip is not byte-exact");
    let mut bad = a.clone();
    bad[..4].copy_from_slice(b"RSQ0");
    ensure!(
        matches!(Dataset::from_bytes(&bad, Path::new("bad")), Err(ressqu::Error::BadMagic { .. })),
        "bad magic accepted"
    );
    ensure!(
        matches!(Dataset::from_bytes(&a[..a.len() - 1], Path::new("short")), Err(ressqu::Error::Truncated { .. })),
        "truncation accepted"
    );
    let (code, _, _) = cli(&["train", "--dataset", path_str(&p("missing.rsq")), "--out-dir", path_str(&p("t3"))]);
    ensure!(code != EXIT_OK, "missing dataset accepted");
    let _ = datasets::MAGIC;
    Ok(format!("gen-data, train ({} files) and probe reruns byte-identical; RSQ1 round trip exact; bad magic and truncation rejected", t1.len()))
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "comparison arithmetic", budget: Some(Duration::from_secs(1)), run: comparison_arithmetic },
        Criterion { id: 2, name: "structural conformance", budget: Some(Duration::from_secs(1)), run: structural_conformance },
        Criterion { id: 3, name: "compression direction", budget: None, run: compression_direction },
        Criterion { id: 4, name: "gradient correctness", budget: Some(Duration::from_secs(120)), run: gradient_correctness },
        Criterion { id: 5, name: "deep-supervision linearity", budget: Some(Duration::from_secs(60)), run: supervision_linearity },
        Criterion { id: 6, name: "alpha schedule", budget: None, run: alpha_schedule },
        Criterion { id: 7, name: "residual identity", budget: None, run: residual_identity },
        Criterion { id: 8, name: "desk-scale learning", budget: Some(Duration::from_secs(600)), run: desk_learning },
        Criterion { id: 9, name: "placement probe", budget: Some(Duration::from_secs(120)), run: placement_probe },
        Criterion { id: 10, name: "determinism and formats", budget: None, run: determinism_and_formats },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str()) || c.id.to_string() == *f) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let elapsed = start.elapsed();
        let result = match (result, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS criterion {:>2} {}: {detail} [{elapsed:.2?}]", c.id, c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2} {}: {why} [{elapsed:.2?}]", c.id, c.name);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
