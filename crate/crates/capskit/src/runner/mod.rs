//! Experiment runner: dataset assembly, the `generate`/`verify`/`train`/
//! `ablate`/`report` commands, and their file outputs.
//!
//! Commands are deterministic functions of their configuration: a rerun with
//! the same config file produces a byte-identical results CSV. Worker
//! parallelism (bounded by the `CAPSKIT_THREADS` environment variable) never
//! changes results because all reductions happen in index order.

pub mod config;
pub mod report;

pub use config::{ExperimentConfig, SamplerChoice};
pub use report::{emit_report, parse_results_csv, results_csv, ReportRow, RunRecord};

use crate::caps::{self, CapsConfig, SelectMode};
use crate::datagen::{
    self, build_testset, gen_raw, sample_training, CropGroup, CropSample, Dataset, Region,
};
use crate::error::{Error, Result};
use crate::metrics::{self, EquivReport, MaskPair, SubsetGroup};
use crate::tensor::{shift2d, Real, ShiftSpec, Tensor4};
use crate::train::{train_network, write_training_log, Example};
use crate::unet::{build_network, predict_mask, save_checkpoint, Network, SamplerKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// Worker pool honouring `CAPSKIT_THREADS`; 0 or unset uses all cores.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("CAPSKIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("worker pool")
}

pub fn to_example(s: &CropSample) -> Example {
    let (h, w) = s.image.shape();
    Example {
        image: Tensor4::from_vec(1, 1, h, w, s.image.pixels().to_vec()).expect("crop tensor"),
        mask: s.mask.clone(),
    }
}

/// Generates (or loads) the dataset described by the configuration.
///
/// Raw images split into train/validation/test; test raws must admit both
/// sliding subsets, so candidates lacking qualifying offsets are skipped
/// deterministically.
pub fn assemble_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    if let Some(dir) = &cfg.data_dir {
        return datagen::load_dataset(dir);
    }
    let spec = cfg.raw_spec();
    let protocol = cfg.protocol();
    let raws: Vec<datagen::RawImage> =
        (0..cfg.raws).map(|i| gen_raw(cfg.dataset_seed * 10_000 + i as u64, &spec)).collect();

    let n_test = (cfg.raws / 10).max(1);
    let n_val = (cfg.raws / 10).max(1);
    if n_test + n_val >= cfg.raws {
        return Err(Error::Config("not enough raws for a train/val/test split".into()));
    }

    // Pick test raws from the back of the list, requiring both subsets.
    let mut test_idx = Vec::new();
    for i in (0..raws.len()).rev() {
        if test_idx.len() == n_test {
            break;
        }
        let ok = build_testset(&raws[i], &protocol, Region::Middle).is_ok()
            && build_testset(&raws[i], &protocol, Region::Boundary).is_ok();
        if ok {
            test_idx.push(i);
        }
    }
    if test_idx.len() < n_test {
        return Err(Error::InvalidArgument(
            "no raw image admits both sliding test subsets; regenerate with another seed".into(),
        ));
    }
    let mut val_idx = Vec::new();
    for i in (0..raws.len()).rev() {
        if val_idx.len() == n_val {
            break;
        }
        if !test_idx.contains(&i) {
            val_idx.push(i);
        }
    }
    let train_raws: Vec<datagen::RawImage> = raws
        .iter()
        .enumerate()
        .filter(|(i, _)| !test_idx.contains(i) && !val_idx.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    let val_raws: Vec<datagen::RawImage> = val_idx.iter().map(|&i| raws[i].clone()).collect();

    let train = sample_training(&train_raws, &protocol, cfg.dataset_seed ^ 0x7A21)?;
    let val = sample_training(&val_raws, &protocol, cfg.dataset_seed ^ 0x1CE5)?;
    for w in train.warnings.iter().chain(&val.warnings) {
        eprintln!("warning: {w}");
    }
    let mut mdt = Vec::new();
    let mut bdt = Vec::new();
    for &i in test_idx.iter().rev() {
        mdt.push(build_testset(&raws[i], &protocol, Region::Middle)?);
        bdt.push(build_testset(&raws[i], &protocol, Region::Boundary)?);
    }
    Ok(Dataset { train: train.samples, val: val.samples, mdt, bdt })
}

/// Runs the network over every crop of every group and scores the
/// predictions. Forward passes run in parallel, collected in sample order.
pub fn eval_on_groups(net: &Network, groups: &[CropGroup]) -> Result<EquivReport> {
    let subset_groups: Vec<SubsetGroup> = groups
        .iter()
        .map(|g| {
            let samples: Vec<MaskPair> = g
                .samples
                .par_iter()
                .map(|s| {
                    let ex = to_example(s);
                    let out = net.forward(&ex.image)?;
                    let pred = predict_mask(&out.logits)?.remove(0);
                    Ok(MaskPair { pred, gt: s.mask.clone(), offset: s.offset })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SubsetGroup { raw_id: g.raw_id.clone(), samples })
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::evaluate_groups(&subset_groups)
}

fn groups_for<'a>(data: &'a Dataset, set: &str) -> &'a [CropGroup] {
    if set == "mdt" {
        &data.mdt
    } else {
        &data.bdt
    }
}

/// `generate`: builds the synthetic dataset and persists it under
/// `<out>/dataset`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    let pool = thread_pool();
    pool.install(|| {
        let data = assemble_dataset(cfg)?;
        let dir = Path::new(&cfg.out).join("dataset");
        datagen::write_dataset(&dir, &data)?;
        println!(
            "dataset written to {}: {} train, {} val crops; {} middle / {} boundary subsets",
            dir.display(),
            data.train.len(),
            data.val.len(),
            data.mdt.len(),
            data.bdt.len()
        );
        Ok(())
    })
}

/// Outcome of the verification suites.
#[derive(Debug)]
pub struct VerifyOutcome {
    pub lines: Vec<String>,
    pub passed: bool,
}

fn signal_tensor(row: &[Real]) -> Tensor4 {
    let mut data = row.to_vec();
    data.extend_from_slice(row);
    Tensor4::from_vec(1, 1, 2, row.len(), data).expect("signal tensor")
}

/// Picks a textured crop whose forward pass has decisive selections at every
/// stage; exact equivalence is only defined there.
fn decisive_input(net: &Network, cfg: &ExperimentConfig, base_seed: u64) -> Result<Tensor4> {
    let spec = cfg.raw_spec();
    for attempt in 0..50 {
        let raw = gen_raw(base_seed + 7000 + attempt, &spec);
        let (h, w) = raw.image.shape();
        let c = cfg.crop_size.min(h).min(w);
        let data: Vec<Real> = (0..c)
            .flat_map(|x| (0..c).map(move |y| raw.image.at(x + (h - c) / 2, y + (w - c) / 2)))
            .collect();
        let x = Tensor4::from_vec(1, 1, c, c, data)?;
        let out = net.forward(&x)?;
        if out.min_selection_margin() > 1e-6 {
            return Ok(x);
        }
    }
    Err(Error::Verification("no input with decisive component selection found".into()))
}

fn shift_list(count: usize, limit: isize, seed: u64) -> Vec<(isize, isize)> {
    let mut shifts = vec![(1, 1), (2, 2), (1, 2), (2, 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while shifts.len() < count {
        let s = (rng.gen_range(-limit..=limit), rng.gen_range(-limit..=limit));
        if s != (0, 0) {
            shifts.push(s);
        }
    }
    shifts.truncate(count);
    shifts
}

/// Mean absolute difference over the interior region (a `margin`-wide border
/// is ignored on every side).
fn interior_abs_dev(a: &Tensor4, b: &Tensor4, margin: usize) -> Real {
    let (batch, c, h, w) = a.shape();
    let mut acc = 0.0;
    let mut n = 0usize;
    for bi in 0..batch {
        for ci in 0..c {
            let pa = a.plane(bi, ci);
            let pb = b.plane(bi, ci);
            for x in margin..h - margin {
                for y in margin..w - margin {
                    acc += (pa[x * w + y] - pb[x * w + y]).abs();
                    n += 1;
                }
            }
        }
    }
    acc / n as Real
}

fn median_of(mut values: Vec<Real>) -> Real {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `verify`: runs the structural checks — the 1-D sampling demo, the
/// circular-shift exactness suite (with the max-pool counterexample as an
/// expected failure), the recorded-index parity relation, and the
/// common-shift deviation comparison. Returns an error (exit code 1) if any
/// required check fails.
pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<VerifyOutcome> {
    let pool = thread_pool();
    pool.install(|| cmd_verify_inner(cfg))
}

fn cmd_verify_inner(cfg: &ExperimentConfig) -> Result<VerifyOutcome> {
    let mut lines: Vec<String> = Vec::new();
    let mut passed = true;
    let mut check = |lines: &mut Vec<String>, passed: &mut bool, name: &str, ok: bool, detail: String| {
        lines.push(format!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
        *passed &= ok;
    };

    // (a) 1-D max-pool demo over the reference signal and its shift.
    let d1 = caps::maxpool_down(&signal_tensor(&[1.0, 2.0, 3.0, 4.0, 3.0, 2.0]))?;
    let d2 = caps::maxpool_down(&signal_tensor(&[2.0, 3.0, 4.0, 3.0, 2.0, 5.0]))?;
    let got1: Vec<Real> = d1.data().to_vec();
    let got2: Vec<Real> = d2.data().to_vec();
    check(
        &mut lines,
        &mut passed,
        "signal demo: maxpool of [1,2,3,4,3,2]",
        got1 == [2.0, 4.0, 3.0],
        format!("{got1:?}"),
    );
    check(
        &mut lines,
        &mut passed,
        "signal demo: maxpool of shifted [2,3,4,3,2,5]",
        got2 == [3.0, 4.0, 5.0],
        format!("{got2:?}"),
    );
    {
        // Informational: the attention-fused downsampling of the same pair
        // stays similar because only the component order changes.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = caps::CapdParams::init(1, (4, 2), cfg.k, &mut rng);
        let caps_cfg = CapsConfig { use_lpf: false, ..CapsConfig::default() };
        let a = caps::capd_forward(&signal_tensor(&[1.0, 2.0, 3.0, 4.0, 3.0, 2.0]), &params, &caps_cfg)?;
        let b = caps::capd_forward(&signal_tensor(&[2.0, 3.0, 4.0, 3.0, 2.0, 5.0]), &params, &caps_cfg)?;
        let fa: Vec<String> = a.d.data()[..3].iter().map(|v| format!("{v:.2}")).collect();
        let fb: Vec<String> = b.d.data()[..3].iter().map(|v| format!("{v:.2}")).collect();
        lines.push(format!(
            "[info] signal demo: attention-fused downsampling [{}] vs shifted [{}]",
            fa.join(", "),
            fb.join(", ")
        ));
    }

    // (b) circular-shift exactness of the full network in the equivalence
    // regime, filter off and on; max-pool must break somewhere.
    let shifts = shift_list(cfg.verify_shifts, (cfg.crop_size / 2) as isize - 1, 11);
    for use_lpf in [false, true] {
        let caps_cfg = CapsConfig { use_lpf, ..CapsConfig::equivalence_regime() };
        let mut net_cfg = cfg.net_config(SamplerChoice::Caps);
        net_cfg.sampler = SamplerKind::Caps(caps_cfg);
        let net = build_network(&net_cfg, cfg.seeds[0])?;
        let x = decisive_input(&net, cfg, 31 + use_lpf as u64)?;
        let base = net.forward(&x)?;
        let base_mask = predict_mask(&base.logits)?;
        let mut max_dev: Real = 0.0;
        let mut masks_equal = true;
        for &(sx, sy) in &shifts {
            let shift = ShiftSpec::circular(sx, sy);
            let out = net.forward(&shift2d(&x, shift, 0.0)?)?;
            let want = shift2d(&base.logits, shift, 0.0)?;
            max_dev = max_dev.max(out.logits.max_abs_diff(&want));
            let want_mask = predict_mask(&want)?;
            masks_equal &= predict_mask(&out.logits)? == want_mask;
            let _ = &base_mask;
        }
        check(
            &mut lines,
            &mut passed,
            &format!("circular exactness (hard select, beta 0, lpf {})", if use_lpf { "on" } else { "off" }),
            max_dev <= 1e-9 && masks_equal,
            format!("max logit deviation {max_dev:.3e} over {} shifts", shifts.len()),
        );
    }
    {
        let net = build_network(&cfg.net_config(SamplerChoice::MaxPool), cfg.seeds[0])?;
        let x = decisive_input(&build_network(&cfg.net_config(SamplerChoice::Caps), cfg.seeds[0])?, cfg, 31)
            .or_else(|_| decisive_input(&net, cfg, 31))?;
        let base = net.forward(&x)?;
        let mut worst: Real = 0.0;
        for &(sx, sy) in &shifts {
            let shift = ShiftSpec::circular(sx, sy);
            let out = net.forward(&shift2d(&x, shift, 0.0)?)?;
            let want = shift2d(&base.logits, shift, 0.0)?;
            worst = worst.max(out.logits.max_abs_diff(&want));
        }
        check(
            &mut lines,
            &mut passed,
            "expected failure: maxpool is not circular-shift equivariant",
            worst > 1e-6,
            format!("max logit deviation {worst:.3e} (non-equivalence confirmed)"),
        );
    }

    // (c) recorded-index parity relation of one downsampling layer.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let caps_cfg = CapsConfig::equivalence_regime();
        let mut ok = true;
        let mut detail = String::new();
        'outer: for attempt in 0..50u64 {
            let params = caps::CapdParams::init(2, (cfg.extractor_w1, cfg.extractor_w2), cfg.k, &mut rng);
            let data = (0..4 * 2 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = Tensor4::from_vec(4, 2, 16, 16, data)?;
            let base = caps::capd_forward(&f, &params, &caps_cfg)?;
            let margin = base
                .scores
                .iter()
                .map(|s| {
                    let mut v = *s;
                    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    v[0] - v[1]
                })
                .fold(Real::INFINITY, Real::min);
            if margin <= 1e-6 {
                continue;
            }
            for (sx, sy) in [(1isize, 1isize), (3, 5), (2, 4), (1, 2), (2, 1), (3, 2)] {
                let shifted = shift2d(&f, ShiftSpec::circular(sx, sy), 0.0)?;
                let out = caps::capd_forward(&shifted, &params, &caps_cfg)?;
                for bi in 0..4 {
                    let (m, n) = caps::phi_encode(base.gamma.gamma[bi] as usize)?;
                    let (mt, nt) = caps::phi_encode(out.gamma.gamma[bi] as usize)?;
                    let want_m = if sx % 2 != 0 { 1 - m } else { m };
                    let want_n = if sy % 2 != 0 { 1 - n } else { n };
                    if (mt, nt) != (want_m, want_n) {
                        ok = false;
                        detail = format!(
                            "shift ({sx},{sy}) batch {bi}: index ({mt},{nt}), expected ({want_m},{want_n})"
                        );
                        break 'outer;
                    }
                }
            }
            detail = format!("odd/even parity tracked for all shifts (attempt {attempt})");
            break;
        }
        check(&mut lines, &mut passed, "recorded-index parity relation", ok, detail);
    }

    // (d) common-shift interior deviation: attention-fused sampling vs
    // max-pool on one-pixel window slides of textured images.
    {
        let spec = cfg.raw_spec();
        let results: Vec<(Real, Real)> = (0..cfg.verify_seeds as u64)
            .into_par_iter()
            .map(|seed| {
                let raw = gen_raw(5000 + seed, &spec);
                let (h, w) = raw.image.shape();
                let c = cfg.crop_size;
                let (ox, oy) = ((h - c) / 2, (w - c) / 2);
                let crop = |ox: usize, oy: usize| -> Result<Tensor4> {
                    let data: Vec<Real> = (0..c)
                        .flat_map(|x| (0..c).map(move |y| raw.image.at(ox + x, oy + y)))
                        .collect();
                    Tensor4::from_vec(1, 1, c, c, data)
                };
                let a = crop(ox, oy)?;
                let b = crop(ox, oy + 1)?;
                let caps_net = build_network(&cfg.net_config(SamplerChoice::Caps), seed)?;
                let max_net = build_network(&cfg.net_config(SamplerChoice::MaxPool), seed)?;
                let margin = c / 4;
                let dev = |net: &Network| -> Result<Real> {
                    let la = net.forward(&a)?.logits;
                    let lb = net.forward(&b)?.logits;
                    // crop B is crop A slid one column: content moves left
                    let la_aligned = shift2d(&la, ShiftSpec::common(0, -1), 0.0)?;
                    Ok(interior_abs_dev(&la_aligned, &lb, margin))
                };
                Ok((dev(&caps_net)?, dev(&max_net)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let caps_med = median_of(results.iter().map(|r| r.0).collect());
        let max_med = median_of(results.iter().map(|r| r.1).collect());
        check(
            &mut lines,
            &mut passed,
            "common-shift interior deviation (median over seeds)",
            caps_med < max_med,
            format!(
                "caps {caps_med:.4e} vs maxpool {max_med:.4e} over {} seeds",
                results.len()
            ),
        );
        // simple timing printout
        let net = build_network(&cfg.net_config(SamplerChoice::Caps), cfg.seeds[0])?;
        let x = Tensor4::zeros(1, 1, cfg.crop_size, cfg.crop_size);
        let t0 = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            net.forward(&x)?;
        }
        lines.push(format!(
            "[info] forward wall clock: {:.1} ms per {}x{} image",
            t0.elapsed().as_secs_f64() * 1000.0 / reps as f64,
            cfg.crop_size,
            cfg.crop_size
        ));
    }

    for line in &lines {
        println!("{line}");
    }
    let out_dir = Path::new(&cfg.out);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("verify_report.txt"), lines.join("\n") + "\n")?;
    if !passed {
        return Err(Error::Verification("one or more verification checks failed".into()));
    }
    Ok(VerifyOutcome { lines, passed })
}

fn train_one(
    cfg: &ExperimentConfig,
    choice: SamplerChoice,
    seed: u64,
    train_ex: &[Example],
    val_ex: &[Example],
) -> Result<crate::train::TrainOutcome> {
    let net = build_network(&cfg.net_config(choice), seed)?;
    train_network(net, train_ex, val_ex, &cfg.train_config(seed))
}

/// `train`: trains one network per configured sampler and seed on shared
/// data, evaluates each on the requested sliding test sets, and writes the
/// results CSV, training logs and checkpoints.
pub fn cmd_train_eval(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let pool = thread_pool();
    pool.install(|| cmd_train_eval_inner(cfg))
}

fn cmd_train_eval_inner(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let data = assemble_dataset(cfg)?;
    let train_ex: Vec<Example> = data.train.iter().map(to_example).collect();
    let val_ex: Vec<Example> = data.val.iter().map(to_example).collect();
    let mut record = RunRecord::new(cfg.echo());
    let out_dir = Path::new(&cfg.out);
    std::fs::create_dir_all(out_dir.join("logs"))?;
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;

    for &choice in &cfg.samplers {
        for &seed in &cfg.seeds {
            let t0 = Instant::now();
            let outcome = train_one(cfg, choice, seed, &train_ex, &val_ex)?;
            record
                .timings
                .push((format!("train {} seed {seed}", choice.name()), t0.elapsed().as_secs_f64()));
            write_training_log(
                out_dir.join("logs").join(format!("{}_seed{seed}.csv", choice.name())),
                &outcome.log,
            )?;
            save_checkpoint(
                &outcome.net,
                out_dir.join("checkpoints").join(format!("{}_seed{seed}.ckpt", choice.name())),
            )?;
            for set in &cfg.sets {
                let report = eval_on_groups(&outcome.net, groups_for(&data, set))?;
                record.rows.push(ReportRow {
                    method: choice.name().to_string(),
                    set: set.clone(),
                    report,
                    seed,
                });
            }
            println!(
                "trained {} seed {seed}: best val loss {:.4}, {} epochs{}",
                choice.name(),
                outcome.best_val_loss,
                outcome.log.len(),
                if outcome.stopped_early { " (early stop)" } else { "" }
            );
        }
    }
    emit_report(&record, &cfg.formats, out_dir)?;
    print_rows(&record.rows);
    Ok(record)
}

/// `ablate`: trains the switch grid (adaptive window, attention, filter) and
/// evaluates inference-time sweeps of the crop proportion and temperature on
/// the fully-equipped model.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let pool = thread_pool();
    pool.install(|| cmd_ablate_inner(cfg))
}

fn cmd_ablate_inner(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let data = assemble_dataset(cfg)?;
    let train_ex: Vec<Example> = data.train.iter().map(to_example).collect();
    let val_ex: Vec<Example> = data.val.iter().map(to_example).collect();
    let mut record = RunRecord::new(cfg.echo());
    let seed = cfg.seeds[0];
    let out_dir = Path::new(&cfg.out);
    std::fs::create_dir_all(out_dir)?;

    let mut full_model: Option<Network> = None;
    for (use_aw, use_ca, use_lpf) in
        [(false, false, false), (false, false, true), (false, true, false), (false, true, true),
         (true, false, false), (true, false, true), (true, true, false), (true, true, true)]
    {
        let mut sub = cfg.clone();
        sub.use_aw = use_aw;
        sub.use_ca = use_ca;
        sub.use_lpf = use_lpf;
        let t0 = Instant::now();
        let outcome = train_one(&sub, SamplerChoice::Caps, seed, &train_ex, &val_ex)?;
        let method = format!("caps_aw{}_ca{}_lpf{}", use_aw as u8, use_ca as u8, use_lpf as u8);
        record.timings.push((format!("train {method}"), t0.elapsed().as_secs_f64()));
        for set in &cfg.sets {
            let report = eval_on_groups(&outcome.net, groups_for(&data, set))?;
            record.rows.push(ReportRow { method: method.clone(), set: set.clone(), report, seed });
        }
        println!("ablation cell {method}: {} epochs", outcome.log.len());
        if use_aw && use_ca && use_lpf {
            full_model = Some(outcome.net);
        }
    }
    let full = full_model.expect("the all-on grid cell");

    for beta in [0.0, 0.125, 0.25, 0.375] {
        let inference = CapsConfig { beta, ..cfg.caps_config() };
        let net = full.with_caps_config(inference)?;
        let default_tag = if (beta - 0.25).abs() < 1e-12 { "_default" } else { "" };
        let method = format!("caps_beta{beta}{default_tag}");
        for set in &cfg.sets {
            let report = eval_on_groups(&net, groups_for(&data, set))?;
            record.rows.push(ReportRow { method: method.clone(), set: set.clone(), report, seed });
        }
    }
    for temperature in [1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
        let inference = CapsConfig { temperature, ..cfg.caps_config() };
        let net = full.with_caps_config(inference)?;
        let default_tag = if (temperature - 1e-3).abs() < 1e-15 { "_default" } else { "" };
        let method = format!("caps_T{temperature}{default_tag}");
        for set in &cfg.sets {
            let report = eval_on_groups(&net, groups_for(&data, set))?;
            record.rows.push(ReportRow { method: method.clone(), set: set.clone(), report, seed });
        }
    }
    emit_report(&record, &cfg.formats, out_dir)?;
    print_rows(&record.rows);
    Ok(record)
}

/// `report`: re-renders CSV and charts from an existing results CSV
/// (`report_input` or `<out>/results.csv`).
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<()> {
    let input = cfg
        .report_input
        .clone()
        .unwrap_or_else(|| Path::new(&cfg.out).join("results.csv").display().to_string());
    let text = std::fs::read_to_string(&input)?;
    let rows = parse_results_csv(&text)?;
    let mut record = RunRecord::new(cfg.echo());
    record.rows = rows;
    emit_report(&record, &cfg.formats, Path::new(&cfg.out))?;
    println!("report re-rendered from {input} into {}", cfg.out);
    Ok(())
}

fn print_rows(rows: &[ReportRow]) {
    println!("{}", report::RESULTS_HEADER);
    print!("{}", results_csv(rows).split_once('\n').map(|(_, rest)| rest).unwrap_or(""));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(out: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.set_key("raws", "4").unwrap();
        cfg.set_key("raw_size", "96").unwrap();
        cfg.set_key("crop_size", "32").unwrap();
        cfg.set_key("margin", "10").unwrap();
        cfg.set_key("max_offsets_per_subset", "6").unwrap();
        cfg.set_key("train_crops_per_raw", "6").unwrap();
        cfg.set_key("base_channels", "2").unwrap();
        cfg.set_key("extractor_w1", "3").unwrap();
        cfg.set_key("extractor_w2", "2").unwrap();
        cfg.set_key("max_epochs", "2").unwrap();
        cfg.set_key("batch_size", "4").unwrap();
        cfg.set_key("seeds", "0").unwrap();
        cfg.set_key("verify_shifts", "6").unwrap();
        cfg.set_key("verify_seeds", "3").unwrap();
        cfg.set_key("out", out).unwrap();
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn assemble_dataset_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path().to_str().unwrap());
        let data = assemble_dataset(&cfg).unwrap();
        assert_eq!(data.train.len(), 2 * 6); // 4 raws - 1 val - 1 test
        assert_eq!(data.val.len(), 6);
        assert_eq!(data.mdt.len(), 1);
        assert!(!data.bdt[0].samples.is_empty());
    }

    #[test]
    fn train_eval_produces_deterministic_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path().to_str().unwrap());
        cfg.set_key("samplers", "maxpool").unwrap();
        cfg.set_key("sets", "mdt").unwrap();
        let a = cmd_train_eval(&cfg).unwrap();
        let b = cmd_train_eval(&cfg).unwrap();
        assert_eq!(results_csv(&a.rows), results_csv(&b.rows));
        assert!(dir.path().join("results.csv").exists());
        assert!(dir.path().join("checkpoints/maxpool_seed0.ckpt").exists());
        assert!(dir.path().join("logs/maxpool_seed0.csv").exists());
    }

    #[test]
    fn verify_passes_at_small_size() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path().to_str().unwrap());
        let outcome = cmd_verify(&cfg).unwrap();
        assert!(outcome.passed);
        assert!(dir.path().join("verify_report.txt").exists());
    }
}
