//! Subcommand implementations: render-data, train-gan, train-hwr, evaluate,
//! sweep-hidden-dim, plot.

use std::path::PathBuf;

use handprint_core::data::{
    make_synthetic_dataset, split_dataset, toy_vocabulary, CorpusStats, FontSpec, LabeledSample,
};
use handprint_core::net::RecognizerMode;
use handprint_core::rng::Rng;
use handprint_core::tensor::Tensor;
use handprint_core::train::{
    self, held_out_l1, prepare_samples, train_recognizer, PreparedSample, RecognizerTrainConfig,
    StepRecord,
};
use handprint_core::{metrics, CoreError};

use crate::config::RunConfig;
use crate::csvio::{metric_row, read_csv, write_csv};
use crate::error::{CliError, Result};
use crate::manifest;
use crate::models;
use crate::plot::{line_chart, Series};

pub fn gan_checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoints").join("gan")
}

pub fn hwr_checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoints").join("hwr")
}

fn font_spec(cfg: &RunConfig) -> FontSpec {
    FontSpec {
        scale: cfg.font_scale,
        ..FontSpec::default()
    }
}

/// Renders the synthetic dataset, writes PNGs + manifest + corpus stats.
pub fn render_data(cfg: &RunConfig) -> Result<()> {
    let vocab = match &cfg.vocab_file {
        Some(path) => manifest::read_vocab(path)?,
        None => toy_vocabulary(),
    };
    let samples = make_synthetic_dataset(
        &vocab,
        cfg.n_samples,
        &font_spec(cfg),
        cfg.distortion,
        cfg.seed,
    )
    .map_err(CliError::from)?;
    manifest::write_dataset(&cfg.data_dir, &samples)?;

    // corpus statistics from the training split only
    let indices: Vec<usize> = (0..samples.len()).collect();
    let (train_idx, _) = split_dataset(indices, cfg.split_ratio, cfg.seed);
    let stats = CorpusStats::compute(
        train_idx
            .iter()
            .flat_map(|&i| [&samples[i].hw, &samples[i].mp]),
    );
    manifest::write_stats(&cfg.data_dir, &stats, &cfg.hash())?;
    manifest::write_run_metadata(&cfg.data_dir, &cfg.canonical_pairs(), &cfg.hash())?;
    println!(
        "rendered {} samples over {} words into {} (train {} / test {})",
        samples.len(),
        vocab.len(),
        cfg.data_dir.display(),
        train_idx.len(),
        samples.len() - train_idx.len(),
    );
    Ok(())
}

/// Loads the rendered dataset and produces standardized train/test splits.
pub fn load_prepared(
    cfg: &RunConfig,
) -> Result<(Vec<PreparedSample>, Vec<PreparedSample>, CorpusStats)> {
    let entries = manifest::read_manifest(&cfg.data_dir)?;
    let samples: Vec<LabeledSample> = manifest::load_samples(&cfg.data_dir, &entries)?;
    let stats = manifest::read_stats(&cfg.data_dir)?;
    let (train_raw, test_raw) = split_dataset(samples, cfg.split_ratio, cfg.seed);
    let train = prepare_samples(&train_raw, &stats).map_err(CliError::from)?;
    let test = prepare_samples(&test_raw, &stats).map_err(CliError::from)?;
    Ok((train, test, stats))
}

fn gan_log_rows(records: &[StepRecord], hash: &str) -> Vec<Vec<String>> {
    records
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                format!("{}", r.l_w),
                format!("{}", r.l_c),
                format!("{}", r.recon_l1),
                format!("{}", r.total),
                hash.to_string(),
            ]
        })
        .collect()
}

/// Trains the three-component game and writes the loss log, a final
/// checkpoint, and a held-out reconstruction summary.
pub fn train_gan(cfg: &RunConfig) -> Result<()> {
    let (train, test, _) = load_prepared(cfg)?;
    let hash = cfg.hash();
    let mut state = models::build_train_state(cfg);
    let eval_set = if test.is_empty() { &train } else { &test };
    let l1_initial = held_out_l1(&state.gen, eval_set);

    // Train in chunks so periodic checkpoints snapshot the live weights.
    let every = (cfg.gan_steps / 10).max(1);
    let chunk = if cfg.checkpoint_every > 0 {
        cfg.checkpoint_every
    } else {
        cfg.gan_steps
    };
    let mut records: Vec<StepRecord> = Vec::with_capacity(cfg.gan_steps);
    let mut remaining = cfg.gan_steps;
    while remaining > 0 {
        let this = chunk.min(remaining);
        let recs = train::train_gan(&mut state, &train, &cfg.hp, this, |r| {
            if r.step % every as u64 == 0 {
                println!(
                    "step {:>6}  L_w {:>10.4}  L_c {:>10.4}  recon {:>8.4}  total {:>10.4}",
                    r.step, r.l_w, r.l_c, r.recon_l1, r.total
                );
            }
        })
        .map_err(CliError::from)?;
        records.extend(recs);
        remaining -= this;
        if cfg.checkpoint_every > 0 && remaining > 0 {
            let dir = cfg
                .out_dir
                .join("checkpoints")
                .join(format!("gan_step{}", state.step));
            models::save_gan(&mut state, &dir, &hash)?;
        }
    }
    let l1_final = held_out_l1(&state.gen, eval_set);

    std::fs::create_dir_all(&cfg.out_dir)?;
    write_csv(
        &cfg.out_dir.join("metrics_gan.csv"),
        &["step", "l_w", "l_c", "recon_l1", "total", "config_hash"],
        &gan_log_rows(&records, &hash),
    )?;
    write_csv(
        &cfg.out_dir.join("gan_summary.csv"),
        &["metric", "value", "n", "config_hash"],
        &[
            metric_row("heldout_l1_initial", l1_initial, eval_set.len(), &hash),
            metric_row("heldout_l1_final", l1_final, eval_set.len(), &hash),
        ],
    )?;
    models::save_gan(&mut state, &gan_checkpoint_dir(cfg), &hash)?;
    manifest::write_run_metadata(&cfg.out_dir, &cfg.canonical_pairs(), &hash)?;
    println!(
        "trained {} generator steps; held-out L1 {:.4} -> {:.4}; checkpoint at {}",
        cfg.gan_steps,
        l1_initial,
        l1_final,
        gan_checkpoint_dir(cfg).display()
    );
    Ok(())
}

fn generator_for_mode(
    cfg: &RunConfig,
    mode: RecognizerMode,
) -> Result<Option<handprint_core::net::UNet>> {
    match mode {
        RecognizerMode::HandwrittenOnly => Ok(None),
        RecognizerMode::GeneratedOnly | RecognizerMode::Joint => {
            let dir = gan_checkpoint_dir(cfg);
            if !dir.join("index.json").exists() {
                return Err(CliError::from(CoreError::MissingModel(format!(
                    "{} (train-gan first)",
                    dir.display()
                ))));
            }
            Ok(Some(models::load_gan(cfg, &dir)?.gen))
        }
    }
}

/// Trains the recognition model in the configured mode and stores its
/// training curve and checkpoint.
pub fn train_hwr(cfg: &RunConfig) -> Result<()> {
    let (train, _, _) = load_prepared(cfg)?;
    let hash = cfg.hash();
    let generator = generator_for_mode(cfg, cfg.rec_mode)?;
    let mut rec = models::build_recognizer(
        cfg,
        cfg.rec_mode,
        cfg.rec_hidden,
        &mut Rng::new(cfg.seed.wrapping_add(17)),
    );
    let tc = RecognizerTrainConfig {
        steps: cfg.hwr_steps,
        batch_size: cfg.hwr_batch,
        lr: cfg.hwr_lr,
        seed: cfg.seed.wrapping_add(29),
    };
    let records =
        train_recognizer(&mut rec, &train, generator.as_ref(), &tc).map_err(CliError::from)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    write_csv(
        &cfg.out_dir.join("metrics_hwr.csv"),
        &["step", "ctc", "config_hash"],
        &records
            .iter()
            .map(|r| vec![r.step.to_string(), format!("{}", r.ctc), hash.clone()])
            .collect::<Vec<_>>(),
    )?;
    models::save_recognizer(
        &mut rec,
        &hwr_checkpoint_dir(cfg),
        records.len() as u64,
        &hash,
    )?;
    manifest::write_run_metadata(&cfg.out_dir, &cfg.canonical_pairs(), &hash)?;
    let last = records.last().map(|r| r.ctc).unwrap_or(f64::NAN);
    println!(
        "trained recognizer for {} steps (final ctc {:.4}); checkpoint at {}",
        records.len(),
        last,
        hwr_checkpoint_dir(cfg).display()
    );
    Ok(())
}

/// Standard-normal fake images on the standardized scale, for the noise
/// baseline of the Frechet comparison.
fn noise_images(n: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::constant(
        &[
            n,
            1,
            handprint_core::data::CANVAS_H,
            handprint_core::data::CANVAS_W,
        ],
        rng.normal_vec(n * handprint_core::data::CANVAS_H * handprint_core::data::CANVAS_W),
    )
}

fn lexicon_of(train: &[PreparedSample]) -> Vec<Vec<usize>> {
    let mut set: std::collections::BTreeSet<Vec<usize>> = std::collections::BTreeSet::new();
    for s in train {
        set.insert(s.classes.clone());
    }
    set.into_iter().collect()
}

/// Scores the trained recognizer on the test split and, when a generator
/// checkpoint exists and the recognizer is single-path, the Frechet
/// distances of generated and noise images against real machine print.
pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let (train, test, _) = load_prepared(cfg)?;
    let eval_set = if test.is_empty() { &train } else { &test };
    let hash = cfg.hash();
    let hwr_dir = hwr_checkpoint_dir(cfg);
    if !hwr_dir.join("index.json").exists() {
        return Err(CliError::Data(format!(
            "recognizer checkpoint missing at {} (train-hwr first)",
            hwr_dir.display()
        )));
    }
    let mut rec = models::load_recognizer(cfg, cfg.rec_mode, cfg.rec_hidden, &hwr_dir)?;
    let generator = match cfg.rec_mode {
        RecognizerMode::HandwrittenOnly => {
            let dir = gan_checkpoint_dir(cfg);
            if dir.join("index.json").exists() {
                Some(models::load_gan(cfg, &dir)?.gen)
            } else {
                None
            }
        }
        _ => Some(generator_for_mode(cfg, cfg.rec_mode)?.expect("checked above")),
    };

    let lexicon = lexicon_of(&train);
    let lex_arg = if cfg.lexicon_decode {
        Some(lexicon.as_slice())
    } else {
        None
    };
    let preds = train::transcribe(
        &mut rec,
        eval_set,
        generator.as_ref(),
        lex_arg,
        cfg.beam_width,
    )
    .map_err(CliError::from)?;
    let refs: Vec<String> = eval_set.iter().map(|s| s.label.clone()).collect();
    let acc = metrics::word_accuracy(&preds, &refs).map_err(CliError::from)?;
    let ld = metrics::average_levenshtein(&preds, &refs).map_err(CliError::from)?;

    let mut rows = vec![
        metric_row("word_accuracy", acc, eval_set.len(), &hash),
        metric_row("avg_levenshtein", ld, eval_set.len(), &hash),
    ];

    // Frechet needs at least two samples per set for a covariance.
    if eval_set.len() >= 2 {
        if let (Some(gen), RecognizerMode::HandwrittenOnly) = (&generator, rec.mode) {
            let real: Vec<&handprint_core::data::Image> = eval_set.iter().map(|s| &s.mp).collect();
            let real_batch = handprint_core::data::image_batch(&real);
            let generated = train::generate_all(gen, eval_set);
            let noise = noise_images(eval_set.len(), cfg.seed.wrapping_add(99));
            let fhd_gen = metrics::fhd(&real_batch, &generated, &mut rec).map_err(CliError::from)?;
            let fhd_noise = metrics::fhd(&real_batch, &noise, &mut rec).map_err(CliError::from)?;
            rows.push(metric_row("fhd_generated", fhd_gen, eval_set.len(), &hash));
            rows.push(metric_row("fhd_noise", fhd_noise, eval_set.len(), &hash));
        }
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    write_csv(
        &cfg.out_dir.join("metrics_eval.csv"),
        &["metric", "value", "n", "config_hash"],
        &rows,
    )?;
    manifest::write_run_metadata(&cfg.out_dir, &cfg.canonical_pairs(), &hash)?;
    for row in &rows {
        println!("{:<18} {:>12}  (n={})", row[0], row[1], row[2]);
    }
    Ok(())
}

pub const SWEEP_DIMS: [usize; 4] = [16, 32, 64, 128];

/// Trains one recognizer per BiLSTM width and reports word accuracy, average
/// edit distance, and (when a generator checkpoint exists) the Frechet
/// distance of its generations, per width.
pub fn sweep_hidden_dim(cfg: &RunConfig) -> Result<()> {
    let (train, test, _) = load_prepared(cfg)?;
    let eval_set = if test.is_empty() { &train } else { &test };
    let hash = cfg.hash();
    let gan_dir = gan_checkpoint_dir(cfg);
    let generator = if gan_dir.join("index.json").exists() {
        Some(models::load_gan(cfg, &gan_dir)?.gen)
    } else {
        None
    };

    let refs: Vec<String> = eval_set.iter().map(|s| s.label.clone()).collect();
    let mut rows = Vec::new();
    let mut acc_pts = Vec::new();
    let mut ld_pts = Vec::new();
    let mut fhd_pts = Vec::new();
    for (i, &dim) in SWEEP_DIMS.iter().enumerate() {
        let mut rec = models::build_recognizer(
            cfg,
            RecognizerMode::HandwrittenOnly,
            dim,
            &mut Rng::new(cfg.seed.wrapping_add(1000 + i as u64)),
        );
        let tc = RecognizerTrainConfig {
            steps: cfg.hwr_steps,
            batch_size: cfg.hwr_batch,
            lr: cfg.hwr_lr,
            seed: cfg.seed.wrapping_add(2000 + i as u64),
        };
        train_recognizer(&mut rec, &train, None, &tc).map_err(CliError::from)?;
        let preds = train::transcribe(&mut rec, eval_set, None, None, cfg.beam_width)
            .map_err(CliError::from)?;
        let acc = metrics::word_accuracy(&preds, &refs).map_err(CliError::from)?;
        let ld = metrics::average_levenshtein(&preds, &refs).map_err(CliError::from)?;
        let fhd_val = match &generator {
            // Frechet needs at least two samples per set for a covariance.
            Some(gen) if eval_set.len() >= 2 => {
                let real: Vec<&handprint_core::data::Image> =
                    eval_set.iter().map(|s| &s.mp).collect();
                let real_batch = handprint_core::data::image_batch(&real);
                let generated = train::generate_all(gen, eval_set);
                metrics::fhd(&real_batch, &generated, &mut rec).map_err(CliError::from)?
            }
            _ => f64::NAN,
        };
        println!(
            "hidden {dim:>4}: word_accuracy {acc:.3}  avg_levenshtein {ld:.3}  fhd {fhd_val:.3}"
        );
        rows.push(vec![
            dim.to_string(),
            format!("{acc}"),
            format!("{ld}"),
            format!("{fhd_val}"),
            hash.clone(),
        ]);
        acc_pts.push((dim as f64, acc));
        ld_pts.push((dim as f64, ld));
        if fhd_val.is_finite() {
            fhd_pts.push((dim as f64, fhd_val));
        }
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    write_csv(
        &cfg.out_dir.join("sweep.csv"),
        &[
            "hidden_dim",
            "word_accuracy",
            "avg_levenshtein",
            "fhd",
            "config_hash",
        ],
        &rows,
    )?;
    let plots = cfg.out_dir.join("plots");
    line_chart(
        &plots.join("sweep_word_accuracy.svg"),
        "word accuracy vs BiLSTM hidden width",
        "hidden dim",
        "word accuracy",
        &[Series {
            name: "word_accuracy".into(),
            points: acc_pts,
        }],
    )?;
    line_chart(
        &plots.join("sweep_avg_levenshtein.svg"),
        "average edit distance vs BiLSTM hidden width",
        "hidden dim",
        "avg levenshtein",
        &[Series {
            name: "avg_levenshtein".into(),
            points: ld_pts,
        }],
    )?;
    if !fhd_pts.is_empty() {
        line_chart(
            &plots.join("sweep_fhd.svg"),
            "Frechet distance vs BiLSTM hidden width",
            "hidden dim",
            "fhd",
            &[Series {
                name: "fhd".into(),
                points: fhd_pts,
            }],
        )?;
    }
    manifest::write_run_metadata(&cfg.out_dir, &cfg.canonical_pairs(), &hash)?;
    println!(
        "sweep written to {}",
        cfg.out_dir.join("sweep.csv").display()
    );
    Ok(())
}

/// Renders loss curves and sweep charts from previously written CSV logs.
pub fn plot(cfg: &RunConfig) -> Result<()> {
    let plots = cfg.out_dir.join("plots");
    let mut produced = 0usize;

    let gan_csv = cfg.out_dir.join("metrics_gan.csv");
    if gan_csv.exists() {
        let (header, rows) = read_csv(&gan_csv)?;
        let col = |name: &str| header.iter().position(|h| h == name);
        let (Some(si), Some(wi), Some(ci), Some(ri), Some(ti)) = (
            col("step"),
            col("l_w"),
            col("l_c"),
            col("recon_l1"),
            col("total"),
        ) else {
            return Err(CliError::Data(format!(
                "{}: unexpected columns",
                gan_csv.display()
            )));
        };
        let series_of = |idx: usize, name: &str| Series {
            name: name.into(),
            points: rows
                .iter()
                .filter_map(|r| Some((r.get(si)?.parse().ok()?, r.get(idx)?.parse().ok()?)))
                .collect(),
        };
        line_chart(
            &plots.join("loss_curves.svg"),
            "adversarial training losses",
            "generator step",
            "loss",
            &[
                series_of(wi, "l_w"),
                series_of(ci, "l_c"),
                series_of(ri, "recon_l1"),
                series_of(ti, "total"),
            ],
        )?;
        produced += 1;
    }

    let hwr_csv = cfg.out_dir.join("metrics_hwr.csv");
    if hwr_csv.exists() {
        let (header, rows) = read_csv(&hwr_csv)?;
        let col = |name: &str| header.iter().position(|h| h == name);
        if let (Some(si), Some(ci)) = (col("step"), col("ctc")) {
            line_chart(
                &plots.join("ctc_curve.svg"),
                "recognizer training loss",
                "step",
                "ctc",
                &[Series {
                    name: "ctc".into(),
                    points: rows
                        .iter()
                        .filter_map(|r| Some((r.get(si)?.parse().ok()?, r.get(ci)?.parse().ok()?)))
                        .collect(),
                }],
            )?;
            produced += 1;
        }
    }

    let sweep_csv = cfg.out_dir.join("sweep.csv");
    if sweep_csv.exists() {
        let (header, rows) = read_csv(&sweep_csv)?;
        let col = |name: &str| header.iter().position(|h| h == name);
        if let (Some(di), Some(ai)) = (col("hidden_dim"), col("word_accuracy")) {
            line_chart(
                &plots.join("sweep_word_accuracy.svg"),
                "word accuracy vs BiLSTM hidden width",
                "hidden dim",
                "word accuracy",
                &[Series {
                    name: "word_accuracy".into(),
                    points: rows
                        .iter()
                        .filter_map(|r| Some((r.get(di)?.parse().ok()?, r.get(ai)?.parse().ok()?)))
                        .collect(),
                }],
            )?;
            produced += 1;
        }
    }

    if produced == 0 {
        return Err(CliError::Data(format!(
            "nothing to plot under {} (run train-gan / train-hwr / sweep-hidden-dim first)",
            cfg.out_dir.display()
        )));
    }
    println!("wrote {produced} chart(s) under {}", plots.display());
    Ok(())
}

/// Dispatch used by main and by the acceptance suite.
pub fn run(command: &str, cfg: &RunConfig) -> Result<()> {
    match command {
        "render-data" => render_data(cfg),
        "train-gan" => train_gan(cfg),
        "train-hwr" => train_hwr(cfg),
        "evaluate" => evaluate(cfg),
        "sweep-hidden-dim" => sweep_hidden_dim(cfg),
        "plot" => plot(cfg),
        other => Err(CliError::Config(format!("unknown subcommand: {other}"))),
    }
}

pub fn usage() -> String {
    let mut s = String::from(
        "usage: handprint <subcommand> [--config FILE] [--key value ...]\n\nsubcommands:\n",
    );
    for (name, what) in [
        (
            "render-data",
            "render the synthetic paired dataset (PNG + manifest + stats)",
        ),
        (
            "train-gan",
            "train the generator against the word- and character-level critics",
        ),
        (
            "train-hwr",
            "train the recognition model (handwritten | generated | joint)",
        ),
        (
            "evaluate",
            "score the recognizer and the generator on the test split",
        ),
        (
            "sweep-hidden-dim",
            "train recognizers at widths 16/32/64/128 and chart the metrics",
        ),
        ("plot", "render SVG charts from previously written CSV logs"),
    ] {
        s.push_str(&format!("  {name:<18} {what}\n"));
    }
    s.push_str("\nconfig precedence: defaults < --config file < flags; see README for keys\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn scratch(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("handprint_cmd_tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    fn toy_flags(dir: &std::path::Path) -> Vec<String> {
        vec![
            format!("--data_dir={}", dir.join("data").display()),
            format!("--out_dir={}", dir.join("out").display()),
            "--n_samples=24".into(),
            "--gan_steps=2".into(),
            "--hwr_steps=2".into(),
            "--hwr_batch=4".into(),
            "--batch_size=4".into(),
            "--n_critic=1".into(),
            "--gen_channels=2,4".into(),
            "--gen_noise_channels=2".into(),
            "--word_disc_channels=2,4".into(),
            "--char_disc_channels=2,4".into(),
            "--char_cell=16".into(),
            "--r_w=8".into(),
            "--r_c=4".into(),
            "--m_w=2".into(),
            "--m_c=2".into(),
            "--rec_channels=2,3,4,4,6".into(),
            "--rec_hidden=4".into(),
            "--split_ratio=0.75".into(),
        ]
    }

    #[test]
    fn full_pipeline_runs_and_is_deterministic() {
        let dir = scratch("pipeline");
        let cfg = parse_config(None, &toy_flags(&dir)).unwrap();
        render_data(&cfg).unwrap();
        train_gan(&cfg).unwrap();
        train_hwr(&cfg).unwrap();
        evaluate(&cfg).unwrap();
        let first = std::fs::read_to_string(cfg.out_dir.join("metrics_eval.csv")).unwrap();
        // same config + seed => byte-identical metrics
        evaluate(&cfg).unwrap();
        let second = std::fs::read_to_string(cfg.out_dir.join("metrics_eval.csv")).unwrap();
        assert_eq!(first, second);
        assert!(first.starts_with("metric,value,n,config_hash"));
        assert!(first.contains(&cfg.hash()));

        plot(&cfg).unwrap();
        assert!(cfg.out_dir.join("plots").join("loss_curves.svg").exists());
    }

    #[test]
    fn evaluate_without_recognizer_is_a_data_error() {
        let dir = scratch("no_rec");
        let cfg = parse_config(None, &toy_flags(&dir)).unwrap();
        render_data(&cfg).unwrap();
        let err = evaluate(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn joint_mode_without_gan_checkpoint_fails() {
        let dir = scratch("joint_missing");
        let mut flags = toy_flags(&dir);
        flags.push("--rec_mode=joint".into());
        let cfg = parse_config(None, &flags).unwrap();
        render_data(&cfg).unwrap();
        let err = train_hwr(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }
}
