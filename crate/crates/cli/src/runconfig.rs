//! Flat key=value run configuration with defaults.
//!
//! One top-level `seed` drives every random stream (generation, sampling,
//! augmentation, permutation baselines) through named sub-streams. The
//! encoder architecture comes from `preset` (desk or vit-s16) and can be
//! overridden key by key.

use crosswell_core::hcsdata::SyntheticConfig;
use crosswell_core::trainloop::TrainConfig;
use crosswell_core::vitencoder::EncoderConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    pub preset: String,
    pub fraction: f64,
    pub permutations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synthetic: SyntheticConfig::default(),
            train: TrainConfig { seed: SyntheticConfig::default().seed, ..TrainConfig::default() },
            preset: "desk".into(),
            fraction: 0.05,
            permutations: 1000,
        }
    }
}

impl RunConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.train.seed = seed;
    }

    /// Parses config text over the defaults. Later lines win; unknown keys
    /// are an error.
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::default();
        // Two passes so `preset` applies before individual encoder keys,
        // regardless of where it appears in the file.
        for line in config_lines(text) {
            let (key, value) = line?;
            if key == "preset" {
                cfg.train.encoder = EncoderConfig::preset(&value)
                    .ok_or_else(|| format!("unknown preset {value:?}, expected desk or vit-s16"))?;
                cfg.preset = value;
            }
        }
        for line in config_lines(text) {
            let (key, value) = line?;
            cfg.apply(&key, &value)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = |what: &str, v: &str| format!("bad value {v:?} for {what}");
        macro_rules! num {
            ($field:expr, $ty:ty) => {{
                $field = value.parse::<$ty>().map_err(|_| bad(key, value))?;
            }};
        }
        match key {
            "seed" => {
                let s = value.parse::<u64>().map_err(|_| bad(key, value))?;
                self.set_seed(s);
            }
            // synthetic data
            "n_perturbations" => num!(self.synthetic.n_perturbations, usize),
            "n_clusters" => num!(self.synthetic.n_clusters, usize),
            "wells_per_perturbation" => num!(self.synthetic.wells_per_perturbation, usize),
            "n_batches" => num!(self.synthetic.n_batches, usize),
            "plates_per_batch" => num!(self.synthetic.plates_per_batch, usize),
            "channels" => {
                num!(self.synthetic.channels, usize);
                self.train.encoder.channels = self.synthetic.channels;
            }
            "height" => num!(self.synthetic.height, usize),
            "width" => num!(self.synthetic.width, usize),
            "batch_gain_std" => num!(self.synthetic.batch_gain_std, f32),
            "batch_offset_std" => num!(self.synthetic.batch_offset_std, f32),
            "pixel_noise_std" => num!(self.synthetic.pixel_noise_std, f32),
            "phenotype_jitter" => num!(self.synthetic.phenotype_jitter, f32),
            "n_compounds" => num!(self.synthetic.n_compounds, usize),
            "n_controls" => num!(self.synthetic.n_controls, usize),
            // training
            "epochs" => num!(self.train.epochs, usize),
            "batch_size" => num!(self.train.batch_size, usize),
            "base_lr" => num!(self.train.base_lr, f64),
            "final_lr" => num!(self.train.final_lr, f64),
            "warmup_epochs" => num!(self.train.warmup_epochs, usize),
            "wd_start" => num!(self.train.wd_start, f64),
            "wd_end" => num!(self.train.wd_end, f64),
            "ema_start" => num!(self.train.ema.start, f64),
            "ema_end" => num!(self.train.ema.end, f64),
            "prototypes" => num!(self.train.prototypes, usize),
            "anchor_temp" => num!(self.train.anchor_temp, f64),
            "target_temp" => num!(self.train.target_temp, f64),
            "align_weight" => num!(self.train.loss.align_weight, f64),
            "entropy_weight" => num!(self.train.loss.entropy_weight, f64),
            "mode" => self.train.mode = value.parse()?,
            "checkpoint_every" => num!(self.train.checkpoint_every, usize),
            // augmentation
            "view_h" => num!(self.train.augment.view_h, usize),
            "view_w" => num!(self.train.augment.view_w, usize),
            "global_scale_min" => num!(self.train.augment.global_scale.0, f64),
            "global_scale_max" => num!(self.train.augment.global_scale.1, f64),
            "focal_scale_min" => num!(self.train.augment.focal_scale.0, f64),
            "focal_scale_max" => num!(self.train.augment.focal_scale.1, f64),
            "flip_prob" => num!(self.train.augment.flip_prob, f64),
            "mask_ratio" => num!(self.train.augment.mask_ratio, f64),
            "anchor_views" => num!(self.train.augment.anchor_views, usize),
            // encoder overrides (preset already applied)
            "preset" => {}
            "patch_size" => num!(self.train.encoder.patch_size, usize),
            "embed_dim" => num!(self.train.encoder.embed_dim, usize),
            "depth" => num!(self.train.encoder.depth, usize),
            "n_heads" => num!(self.train.encoder.n_heads, usize),
            "mlp_ratio" => num!(self.train.encoder.mlp_ratio, f64),
            "max_grid" => num!(self.train.encoder.max_grid, usize),
            "proj_dim" => num!(self.train.encoder.proj_dim, usize),
            // evaluation
            "fraction" => num!(self.fraction, f64),
            "permutations" => num!(self.permutations, usize),
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// The fully resolved configuration; parseable by [`RunConfig::parse`].
    pub fn echo(&self) -> String {
        let s = &self.synthetic;
        let t = &self.train;
        let mut out = String::new();
        out.push_str(&format!("seed={}\n", t.seed));
        out.push_str(&format!(
            "n_perturbations={}\nn_clusters={}\nwells_per_perturbation={}\nn_batches={}\nplates_per_batch={}\n",
            s.n_perturbations, s.n_clusters, s.wells_per_perturbation, s.n_batches, s.plates_per_batch
        ));
        out.push_str(&format!("channels={}\nheight={}\nwidth={}\n", s.channels, s.height, s.width));
        out.push_str(&format!(
            "batch_gain_std={}\nbatch_offset_std={}\npixel_noise_std={}\nphenotype_jitter={}\n",
            s.batch_gain_std, s.batch_offset_std, s.pixel_noise_std, s.phenotype_jitter
        ));
        out.push_str(&format!("n_compounds={}\nn_controls={}\n", s.n_compounds, s.n_controls));
        out.push_str(&format!("preset={}\n", self.preset));
        out.push_str(&t.echo());
        out.push_str(&format!("fraction={}\npermutations={}\n", self.fraction, self.permutations));
        out
    }
}

fn config_lines(text: &str) -> impl Iterator<Item = Result<(String, String), String>> + '_ {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        Some(
            line.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| format!("line {}: expected key=value, got {raw:?}", i + 1)),
        )
    })
}
