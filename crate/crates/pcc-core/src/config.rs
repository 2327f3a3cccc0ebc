//! Flat `key = value` configuration with dotted paths, plus CLI-style
//! overrides. Unknown keys are a hard error; precedence is
//! defaults < file < overrides.

use crate::error::{Error, Result};
use crate::losses::Pooling;
use crate::model::{Ablation, ImageBackend, ModelConfig};
use crate::synthetic::{ShapeFamily, SyntheticSpec};
use crate::train::TrainConfig;
use std::path::Path;

/// Everything a run needs: model layout, training schedule, synthetic
/// data settings, and evaluation knobs.
#[derive(Clone, Debug)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    /// Samples generated when training synthetically.
    pub synthetic_count: usize,
    /// Extra held-out samples for evaluation.
    pub holdout_count: usize,
    pub fscore_d: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticSpec::named(ShapeFamily::Sphere),
            synthetic_count: 64,
            holdout_count: 16,
            fscore_d: 0.001,
        }
    }
}

impl Config {
    /// Desk-scale defaults used for synthetic runs.
    pub fn desk_scale() -> Self {
        let model = ModelConfig::desk_scale();
        let synthetic = SyntheticSpec {
            points: model.decoder.n_c,
            partial_points: 256,
            feature_dim: model.image_dim,
            ..SyntheticSpec::named(ShapeFamily::Sphere)
        };
        Config {
            model,
            train: TrainConfig::desk_scale(),
            synthetic,
            synthetic_count: 64,
            holdout_count: 16,
            fscore_d: 0.001,
        }
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad_value = |what: &str| {
            Error::Config(format!("cannot parse {value:?} as {what} for key {key:?}"))
        };
        macro_rules! num {
            ($what:literal) => {
                value.parse().map_err(|_| bad_value($what))?
            };
        }
        match key {
            "model.latent_dim" => {
                self.model.encoder.latent_dim = num!("an integer");
            }
            "model.heads" => self.model.heads = num!("an integer"),
            "model.residual" => self.model.residual = num!("a boolean"),
            "model.image_backend" => self.model.image_backend = ImageBackend::parse(value)?,
            "model.pooling" => {
                self.model.pooling = match value {
                    "max" => Pooling::Max,
                    "mean" => Pooling::Mean,
                    _ => return Err(bad_value("max|mean")),
                }
            }
            "model.ablation" => self.model.ablation = Ablation::parse(value)?,
            "encoder.k1" => self.model.encoder.k1 = num!("an integer"),
            "encoder.embed_dim" => self.model.encoder.embed_dim = num!("an integer"),
            "encoder.level1_width" => self.model.encoder.level1_width = num!("an integer"),
            "encoder.level2_width" => self.model.encoder.level2_width = num!("an integer"),
            "encoder.local_count" => self.model.encoder.local_count = num!("an integer"),
            "encoder.global_count" => self.model.encoder.global_count = num!("an integer"),
            "encoder.groups" => self.model.encoder.groups = num!("an integer"),
            "encoder.slope" => self.model.encoder.slope = num!("a number"),
            "encoder.bands" => self.model.encoder.bands = num!("an integer"),
            "decoder.m_gen" => self.model.decoder.m_gen = num!("an integer"),
            "decoder.n_c" => self.model.decoder.n_c = num!("an integer"),
            "decoder.seed_dim" => self.model.decoder.seed_dim = num!("an integer"),
            "decoder.hidden" => self.model.decoder.hidden = num!("an integer"),
            "image.patch" => self.model.patch = num!("an integer"),
            "image.width" => self.model.image_dim = num!("an integer"),
            "image.size" => self.model.image_size = num!("an integer"),
            "image.trainable" => self.model.image_trainable = num!("a boolean"),
            "train.batch_size" => self.train.batch_size = num!("an integer"),
            "train.epochs" => self.train.epochs = num!("an integer"),
            "train.lr0" => self.train.lr0 = num!("a number"),
            "train.lr_drop_epochs" => {
                self.train.lr_drop_epochs = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse().map_err(|_| bad_value("a comma list of integers")))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "train.lr_factor" => self.train.lr_factor = num!("a number"),
            "train.seed" => self.train.seed = num!("an integer"),
            "train.lambda_cd" => self.train.lambda_cd = num!("a number"),
            "train.lambda_con" => self.train.lambda_con = num!("a number"),
            "train.tau" => self.train.tau = num!("a number"),
            "train.clip_norm" => self.train.clip_norm = num!("a number"),
            "train.closs_batch_mean" => self.train.closs_batch_mean = num!("a boolean"),
            "synthetic.shape" => self.synthetic.shape = ShapeFamily::parse(value)?,
            "synthetic.points" => self.synthetic.points = num!("an integer"),
            "synthetic.partial_points" => self.synthetic.partial_points = num!("an integer"),
            "synthetic.occlusion_fraction" => {
                self.synthetic.occlusion_fraction = num!("a number");
            }
            "synthetic.noise_sigma" => self.synthetic.noise_sigma = num!("a number"),
            "synthetic.count" => self.synthetic_count = num!("an integer"),
            "synthetic.holdout" => self.holdout_count = num!("an integer"),
            "eval.fscore_d" => {
                self.fscore_d = num!("a number");
                self.train.fscore_d = self.fscore_d;
            }
            _ => {
                return Err(Error::Config(format!("unknown configuration key {key:?}")));
            }
        }
        Ok(())
    }

    /// Parse a config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(display.clone(), e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: lineno + 1,
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: display.clone(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Apply `key=value` strings from the command line (highest priority).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::Config(format!(
                    "override {item:?} must have the form key=value"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Keep the synthetic generator consistent with the model it feeds.
    pub fn sync_synthetic(&mut self) {
        self.synthetic.feature_dim = self.model.image_dim;
        self.synthetic.points = self.model.decoder.n_c;
    }

    /// Serialize every key so a run can be reproduced from its output dir.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let drops: Vec<String> = self.train.lr_drop_epochs.iter().map(|d| d.to_string()).collect();
        let rows: Vec<(String, String)> = vec![
            ("model.latent_dim".into(), self.model.encoder.latent_dim.to_string()),
            ("model.heads".into(), self.model.heads.to_string()),
            ("model.residual".into(), self.model.residual.to_string()),
            ("model.image_backend".into(), self.model.image_backend.name().into()),
            (
                "model.pooling".into(),
                match self.model.pooling {
                    Pooling::Max => "max".into(),
                    Pooling::Mean => "mean".into(),
                },
            ),
            ("model.ablation".into(), self.model.ablation.name().into()),
            ("encoder.k1".into(), self.model.encoder.k1.to_string()),
            ("encoder.embed_dim".into(), self.model.encoder.embed_dim.to_string()),
            ("encoder.level1_width".into(), self.model.encoder.level1_width.to_string()),
            ("encoder.level2_width".into(), self.model.encoder.level2_width.to_string()),
            ("encoder.local_count".into(), self.model.encoder.local_count.to_string()),
            ("encoder.global_count".into(), self.model.encoder.global_count.to_string()),
            ("encoder.groups".into(), self.model.encoder.groups.to_string()),
            ("encoder.slope".into(), self.model.encoder.slope.to_string()),
            ("encoder.bands".into(), self.model.encoder.bands.to_string()),
            ("decoder.m_gen".into(), self.model.decoder.m_gen.to_string()),
            ("decoder.n_c".into(), self.model.decoder.n_c.to_string()),
            ("decoder.seed_dim".into(), self.model.decoder.seed_dim.to_string()),
            ("decoder.hidden".into(), self.model.decoder.hidden.to_string()),
            ("image.patch".into(), self.model.patch.to_string()),
            ("image.width".into(), self.model.image_dim.to_string()),
            ("image.size".into(), self.model.image_size.to_string()),
            ("image.trainable".into(), self.model.image_trainable.to_string()),
            ("train.batch_size".into(), self.train.batch_size.to_string()),
            ("train.epochs".into(), self.train.epochs.to_string()),
            ("train.lr0".into(), self.train.lr0.to_string()),
            ("train.lr_drop_epochs".into(), drops.join(",")),
            ("train.lr_factor".into(), self.train.lr_factor.to_string()),
            ("train.seed".into(), self.train.seed.to_string()),
            ("train.lambda_cd".into(), self.train.lambda_cd.to_string()),
            ("train.lambda_con".into(), self.train.lambda_con.to_string()),
            ("train.tau".into(), self.train.tau.to_string()),
            ("train.clip_norm".into(), self.train.clip_norm.to_string()),
            ("train.closs_batch_mean".into(), self.train.closs_batch_mean.to_string()),
            ("synthetic.shape".into(), self.synthetic.shape.name().into()),
            ("synthetic.points".into(), self.synthetic.points.to_string()),
            ("synthetic.partial_points".into(), self.synthetic.partial_points.to_string()),
            (
                "synthetic.occlusion_fraction".into(),
                self.synthetic.occlusion_fraction.to_string(),
            ),
            ("synthetic.noise_sigma".into(), self.synthetic.noise_sigma.to_string()),
            ("synthetic.count".into(), self.synthetic_count.to_string()),
            ("synthetic.holdout".into(), self.holdout_count.to_string()),
            ("eval.fscore_d".into(), self.fscore_d.to_string()),
        ];
        for (k, v) in rows {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_hard_error() {
        let mut cfg = Config::default();
        let err = cfg.set("encoder.bogus", "1").unwrap_err();
        assert!(err.to_string().contains("encoder.bogus"));
    }

    #[test]
    fn file_then_override_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nencoder.k1 = 8\ntrain.lr0 = 0.01\n").unwrap();
        let mut cfg = Config::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.model.encoder.k1, 8);
        cfg.apply_overrides(&["encoder.k1=4".to_string()]).unwrap();
        assert_eq!(cfg.model.encoder.k1, 4);
        assert!((cfg.train.lr0 - 0.01).abs() < 1e-9);
    }

    #[test]
    fn file_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "encoder.k1 = 8\nnot a pair\n").unwrap();
        let mut cfg = Config::default();
        match cfg.apply_file(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn render_round_trips_through_parser() {
        let mut cfg = Config::desk_scale();
        cfg.set("train.seed", "42").unwrap();
        cfg.set("model.ablation", "no_closs").unwrap();
        let rendered = cfg.render();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.cfg");
        std::fs::write(&path, &rendered).unwrap();
        let mut back = Config::default();
        back.apply_file(&path).unwrap();
        assert_eq!(back.render(), rendered);
    }

    #[test]
    fn drop_epochs_list_parses() {
        let mut cfg = Config::default();
        cfg.set("train.lr_drop_epochs", "10, 20,30").unwrap();
        assert_eq!(cfg.train.lr_drop_epochs, vec![10, 20, 30]);
    }
}
