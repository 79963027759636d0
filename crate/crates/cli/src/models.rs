//! Model construction from a run configuration, plus checkpoint glue for
//! the three-network GAN container.

use std::path::Path;

use handprint_core::data::{alphabet_size, CANVAS_H, CANVAS_W};
use handprint_core::net::{CnnPathConfig, Recognizer, RecognizerMode, UNet, UNetConfig};
use handprint_core::nn::{ParamOwner, ParamVisitor};
use handprint_core::rng::Rng;
use handprint_core::swd::{SwdDiscConfig, SwdDiscriminator};
use handprint_core::train::TrainState;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::Result;

pub fn build_generator(cfg: &RunConfig, rng: &mut Rng) -> UNet {
    UNet::new(
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            image_h: CANVAS_H,
            image_w: CANVAS_W,
            channels: cfg.gen_channels.clone(),
            noise_channels: cfg.gen_noise_channels,
            leaky_slope: cfg.hp.leaky_slope,
        },
        rng,
    )
}

pub fn build_word_disc(cfg: &RunConfig, rng: &mut Rng) -> SwdDiscriminator {
    SwdDiscriminator::new(
        SwdDiscConfig {
            in_channels: 2,
            image_h: CANVAS_H,
            image_w: CANVAS_W,
            channels: cfg.word_disc_channels.clone(),
            latent: cfg.hp.r_w,
            blocks: cfg.hp.m_w,
            leaky_slope: cfg.hp.leaky_slope,
        },
        rng,
    )
}

pub fn build_char_disc(cfg: &RunConfig, rng: &mut Rng) -> SwdDiscriminator {
    SwdDiscriminator::new(
        SwdDiscConfig {
            in_channels: 1,
            image_h: cfg.char_cell,
            image_w: cfg.char_cell,
            channels: cfg.char_disc_channels.clone(),
            latent: cfg.hp.r_c,
            blocks: cfg.hp.m_c,
            leaky_slope: cfg.hp.leaky_slope,
        },
        rng,
    )
}

pub fn build_train_state(cfg: &RunConfig) -> TrainState {
    let mut rng = Rng::new(cfg.seed);
    let gen = build_generator(cfg, &mut rng);
    let d_w = build_word_disc(cfg, &mut rng);
    let d_c = build_char_disc(cfg, &mut rng);
    let mut st = TrainState::new(gen, d_w, d_c, &cfg.hp, cfg.seed.wrapping_add(1));
    st.char_cell = cfg.char_cell;
    st
}

pub fn build_recognizer(
    cfg: &RunConfig,
    mode: RecognizerMode,
    hidden: usize,
    rng: &mut Rng,
) -> Recognizer {
    let path = CnnPathConfig {
        in_channels: 1,
        image_h: CANVAS_H,
        image_w: CANVAS_W,
        channels: cfg.rec_channels.clone(),
        pools: vec![(2, 2), (2, 2), (2, 2), (2, 2), (2, 1)],
    };
    Recognizer::new(mode, path, hidden, alphabet_size(), rng)
}

/// All three GAN networks in one checkpoint, names prefixed by component.
struct GanContainer<'a> {
    state: &'a mut TrainState,
}

impl ParamOwner for GanContainer<'_> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.state.gen.visit_params(&p("gen"), v);
        self.state.d_w.visit_params(&p("d_w"), v);
        self.state.d_c.visit_params(&p("d_c"), v);
    }
}

pub fn save_gan(state: &mut TrainState, dir: &Path, config_hash: &str) -> Result<()> {
    let step = state.step;
    let mut container = GanContainer { state };
    Checkpoint::from_model(&mut container, step, config_hash).save(dir)
}

/// Rebuilds the GAN from a checkpoint on top of freshly constructed models.
pub fn load_gan(cfg: &RunConfig, dir: &Path) -> Result<TrainState> {
    let ckpt = Checkpoint::load(dir)?;
    let mut state = build_train_state(cfg);
    {
        let mut container = GanContainer { state: &mut state };
        ckpt.into_model(&mut container)?;
    }
    state.step = ckpt.step;
    Ok(state)
}

pub fn save_recognizer(
    rec: &mut Recognizer,
    dir: &Path,
    step: u64,
    config_hash: &str,
) -> Result<()> {
    Checkpoint::from_model(rec, step, config_hash).save(dir)
}

pub fn load_recognizer(
    cfg: &RunConfig,
    mode: RecognizerMode,
    hidden: usize,
    dir: &Path,
) -> Result<Recognizer> {
    let ckpt = Checkpoint::load(dir)?;
    let mut rec = build_recognizer(cfg, mode, hidden, &mut Rng::new(cfg.seed.wrapping_add(17)));
    ckpt.into_model(&mut rec)?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn toy_cfg() -> RunConfig {
        parse_config(
            None,
            &[
                "--gen_channels=4,8".into(),
                "--word_disc_channels=4,8".into(),
                "--char_disc_channels=4".into(),
                "--char_cell=16".into(),
                "--r_w=16".into(),
                "--r_c=8".into(),
                "--rec_channels=4,6,8,8,12".into(),
                "--rec_hidden=8".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn gan_checkpoint_round_trips_through_files() {
        let cfg = toy_cfg();
        let dir = std::env::temp_dir().join("handprint_gan_ckpt_test");
        let _ = std::fs::remove_dir_all(&dir);
        let mut state = build_train_state(&cfg);
        state.step = 5;
        save_gan(&mut state, &dir, &cfg.hash()).unwrap();
        let loaded = Checkpoint::load(&dir).unwrap();
        assert_eq!(loaded.step, 5);
        assert_eq!(loaded.config_hash, cfg.hash());
        let mut reloaded = load_gan(&cfg, &dir).unwrap();
        assert_eq!(reloaded.step, 5);
        // parameters agree at f32 precision
        let mut a = Vec::new();
        GanContainer { state: &mut state }.visit_params(
            "",
            &mut |_n: &str, t: &mut handprint_core::Tensor| {
                a.extend(t.data().iter().map(|&v| v as f32));
            },
        );
        let mut b = Vec::new();
        GanContainer {
            state: &mut reloaded,
        }
        .visit_params("", &mut |_n: &str, t: &mut handprint_core::Tensor| {
            b.extend(t.data().iter().map(|&v| v as f32));
        });
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn recognizer_checkpoint_keeps_running_stats() {
        use handprint_core::data::Image;
        use handprint_core::train::{train_recognizer, PreparedSample, RecognizerTrainConfig};

        let cfg = toy_cfg();
        let mut rng = Rng::new(3);
        let mut rec = build_recognizer(&cfg, RecognizerMode::HandwrittenOnly, 8, &mut rng);
        // a couple of training steps move the BN running stats off init
        let data: Vec<PreparedSample> = (0..4)
            .map(|i| PreparedSample {
                hw: Image {
                    h: 32,
                    w: 128,
                    pixels: rng.normal_vec(32 * 128),
                },
                mp: Image {
                    h: 32,
                    w: 128,
                    pixels: rng.normal_vec(32 * 128),
                },
                char_boxes: vec![(2, 12)],
                classes: vec![i % 3],
                label: "x".into(),
            })
            .collect();
        let tc = RecognizerTrainConfig {
            steps: 2,
            batch_size: 4,
            lr: 1e-3,
            seed: 1,
        };
        train_recognizer(&mut rec, &data, None, &tc).unwrap();

        let dir = std::env::temp_dir().join("handprint_rec_ckpt_test");
        let _ = std::fs::remove_dir_all(&dir);
        save_recognizer(&mut rec, &dir, 2, "h").unwrap();
        let mut back = load_recognizer(&cfg, RecognizerMode::HandwrittenOnly, 8, &dir).unwrap();

        let collect = |r: &mut Recognizer| {
            let mut out = Vec::new();
            r.visit_buffers("buffers", &mut |_n: &str, d: &mut Vec<f64>| {
                out.extend(d.iter().map(|&v| v as f32));
            });
            out
        };
        let a = collect(&mut rec);
        let b = collect(&mut back);
        assert!(!a.is_empty());
        assert_eq!(a, b);
        assert!(
            a.iter().any(|&v| v != 0.0 && v != 1.0),
            "stats should have moved"
        );
    }
}
