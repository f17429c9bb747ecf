//! `key = value` run configuration with defaults for every knob.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use deal_core::{
    default_lambda, AlignMode, HyperParams, OptimizerConfig, OptimizerKind, SplitMode, SplitRecipe, TightScope,
    TrainConfig,
};

/// Every accepted key with its default value, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    // inputs and outputs
    ("edges", "data/cora/edges.tsv"),
    ("features", "data/cora/features.tsv"),
    ("out", "runs/default"),
    ("split_file", ""),
    ("checkpoint", ""),
    // splitting
    ("mode", "transductive"),
    ("val_frac", "0.1"),
    ("test_frac", "0.1"),
    ("hidden_frac", "0.1"),
    ("val_hidden_frac", "0.1"),
    ("seed", "0"),
    ("trials", "1"),
    // schedule
    ("epochs", "500"),
    ("batches_per_epoch", "auto"),
    ("eval_every", "5"),
    ("patience", "10"),
    ("optimizer", "adam"),
    ("lr", "0.01"),
    ("adam_beta1", "0.9"),
    ("adam_beta2", "0.999"),
    ("adam_eps", "1e-8"),
    // model
    ("hidden_dims", "256"),
    ("embed_dim", "64"),
    ("elu_alpha", "1"),
    ("d_max", "5"),
    // loss and scoring
    ("batch_size", "512"),
    ("pos_frac", "0.4"),
    ("gamma1", "1"),
    ("gamma2", "1"),
    ("b1", "0"),
    ("b2", "0"),
    ("beta", "1"),
    ("theta", "1,1,1"),
    ("lambda", "auto"),
    ("align", "loose"),
    ("tight_scope", "batch"),
    ("symmetrize_loose_align", "false"),
    ("symmetrize_scores", "false"),
    // evaluation and diagnostics
    ("eval_set", "test"),
    ("h_max", "5"),
    ("diagnose_kind", "both"),
    // sweeps: lists separated by ';' (empty = not swept)
    ("sweep.gamma", ""),
    ("sweep.gamma1", ""),
    ("sweep.gamma2", ""),
    ("sweep.b", ""),
    ("sweep.b1", ""),
    ("sweep.b2", ""),
    ("sweep.beta", ""),
    ("sweep.theta", ""),
    ("sweep.lambda", ""),
    ("sweep.lr", ""),
    ("sweep.align", ""),
    ("sweep_parallel", "false"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(_, v)| v.to_string()).collect(),
        }
    }
}

fn index_of(key: &str) -> Result<usize> {
    KEYS.iter()
        .position(|(k, _)| *k == key)
        .ok_or_else(|| anyhow!("unknown config key `{key}`"))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| anyhow!("config key `{key}`: cannot parse `{v}`: {e}"))
}

/// Parses `a,b,c` into a triple.
pub fn parse_triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let xs: Vec<f64> = v.split(',').map(|x| parse(key, x)).collect::<Result<_>>()?;
    xs.try_into()
        .map_err(|_| anyhow!("config key `{key}` needs three comma-separated values, got `{v}`"))
}

/// `off` is an alias for a zero distance weight.
fn parse_beta(key: &str, v: &str) -> Result<f64> {
    if v.trim() == "off" {
        Ok(0.0)
    } else {
        parse(key, v)
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = RunConfig::default();
        cfg.merge_str(&text)
            .with_context(|| format!("in config {}", path.display()))?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v.trim())
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let i = index_of(key)?;
        self.values[i] = value.to_string();
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{pair}` is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        let i = index_of(key).expect("key listed in KEYS");
        &self.values[i]
    }

    pub fn get_as<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        parse(key, self.get(key))
    }

    /// Every effective value as a replayable config file.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for ((k, _), v) in KEYS.iter().zip(&self.values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn entries(&self) -> impl Iterator<Item = (&'static str, &str)> {
        KEYS.iter().map(|(k, _)| *k).zip(self.values.iter().map(String::as_str))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    fn path_or(&self, key: &str, default_name: &str) -> PathBuf {
        match self.get(key) {
            "" => self.out_dir().join(default_name),
            p => PathBuf::from(p),
        }
    }

    pub fn split_path(&self) -> PathBuf {
        self.path_or("split_file", "split.txt")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path_or("checkpoint", "model.ckpt")
    }

    pub fn mode(&self) -> Result<SplitMode> {
        self.get_as("mode")
    }

    pub fn split_recipe(&self) -> Result<SplitRecipe> {
        Ok(match self.mode()? {
            SplitMode::Transductive => SplitRecipe::Transductive {
                val_frac: self.get_as("val_frac")?,
                test_frac: self.get_as("test_frac")?,
            },
            SplitMode::Inductive => SplitRecipe::Inductive {
                hidden_frac: self.get_as("hidden_frac")?,
                val_frac: self.get_as("val_hidden_frac")?,
            },
        })
    }

    pub fn lambda(&self) -> Result<[f64; 3]> {
        match self.get("lambda").trim() {
            "auto" => Ok(default_lambda(self.mode()?)),
            v => parse_triple("lambda", v),
        }
    }

    pub fn hyper_params(&self) -> Result<HyperParams> {
        let hp = HyperParams {
            gamma1: self.get_as("gamma1")?,
            b1: self.get_as("b1")?,
            gamma2: self.get_as("gamma2")?,
            b2: self.get_as("b2")?,
            beta: parse_beta("beta", self.get("beta"))?,
            theta: parse_triple("theta", self.get("theta"))?,
            lambda: self.lambda()?,
            align_mode: self.get_as::<AlignMode>("align")?,
            tight_scope: self.get_as::<TightScope>("tight_scope")?,
            symmetrize_loose_align: self.get_as("symmetrize_loose_align")?,
            symmetrize_scores: self.get_as("symmetrize_scores")?,
            batch_size: self.get_as("batch_size")?,
            pos_frac: self.get_as("pos_frac")?,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let hidden = match self.get("hidden_dims").trim() {
            "" | "none" => Vec::new(),
            v => v.split(',').map(|x| parse("hidden_dims", x)).collect::<Result<_>>()?,
        };
        let batches_per_epoch = match self.get("batches_per_epoch").trim() {
            "auto" => None,
            v => Some(parse("batches_per_epoch", v)?),
        };
        let cfg = TrainConfig {
            epochs: self.get_as("epochs")?,
            batches_per_epoch,
            hp: self.hyper_params()?,
            optimizer: OptimizerConfig {
                kind: self.get_as::<OptimizerKind>("optimizer")?,
                lr: self.get_as("lr")?,
                beta1: self.get_as("adam_beta1")?,
                beta2: self.get_as("adam_beta2")?,
                eps: self.get_as("adam_eps")?,
            },
            seed: self.get_as("seed")?,
            eval_every: self.get_as("eval_every")?,
            patience: self.get_as("patience")?,
            d_max: self.get_as("d_max")?,
            hidden,
            embed_dim: self.get_as("embed_dim")?,
            elu_alpha: self.get_as("elu_alpha")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn trials(&self) -> Result<usize> {
        let t: usize = self.get_as("trials")?;
        if t == 0 {
            bail!("trials must be at least 1");
        }
        Ok(t)
    }

    /// Validates every key that has a typed meaning.
    pub fn check(&self) -> Result<()> {
        self.train_config()?;
        self.split_recipe()?;
        self.trials()?;
        self.get_as::<deal_core::EvalSet>("eval_set")?;
        self.get_as::<u32>("h_max")?;
        self.get_as::<bool>("sweep_parallel")?;
        match self.get("diagnose_kind") {
            "both" | "structure" | "attribute" => {}
            k => bail!("diagnose_kind must be both, structure or attribute, got `{k}`"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.check().unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t, TrainConfig::default());
        assert_eq!(c.lambda().unwrap(), [1.0 / 3.0; 3]);
    }

    #[test]
    fn file_values_and_overrides() {
        let mut c = RunConfig::default();
        c.merge_str("# comment\nmode = inductive\n\ngamma1 = 2.5  # trailing\nbeta = off\n").unwrap();
        c.set_pair("theta=1,0.5,1").unwrap();
        let hp = c.hyper_params().unwrap();
        assert_eq!(hp.gamma1, 2.5);
        assert_eq!(hp.beta, 0.0);
        assert_eq!(hp.theta, [1.0, 0.5, 1.0]);
        assert_eq!(hp.lambda, [0.0, 0.7, 0.3]);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut c = RunConfig::default();
        assert!(c.merge_str("gama1 = 2\n").is_err());
        assert!(c.set_pair("nokey").is_err());
    }

    #[test]
    fn echo_replays_exactly() {
        let mut c = RunConfig::default();
        c.set("lr", "0.003").unwrap();
        c.set("sweep.gamma", "1; 2").unwrap();
        let mut back = RunConfig::default();
        back.merge_str(&c.echo()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut c = RunConfig::default();
        c.set("epochs", "many").unwrap();
        let err = c.train_config().unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
    }
}
