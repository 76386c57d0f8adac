use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use dcgm::metrics::MeteorConfig;
use dcgm::retrieval::{MinerConfig, DEFAULT_B, DEFAULT_K1, DEFAULT_LOO_TRIALS, DEFAULT_RATING_THRESHOLD};
use dcgm::rescore::MertOptions;
use dcgm::train::read_key_values;
use dcgm::{Error, Result, TrainConfig};

/// Every tunable of every command, resolved from defaults, `--config` and
/// `--seed`. The manifest records all of it.
#[derive(Debug, Clone)]
pub struct Settings {
    pub train: TrainConfig,
    pub min_bigram_count: u32,
    pub vocab_size: usize,
    pub heldout_fraction: f64,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub miner: MinerConfig,
    pub rating_threshold: f64,
    pub nbest_size: usize,
    pub mert: MertOptions,
    pub loo_trials: usize,
    pub meteor: MeteorConfig,
    pub seed: u64,
}

impl Default for Settings {
    fn default() -> Self {
        let train = TrainConfig::default();
        let seed = train.seed;
        Self {
            train,
            min_bigram_count: 3,
            vocab_size: 50_000,
            heldout_fraction: 0.05,
            bm25_k1: DEFAULT_K1,
            bm25_b: DEFAULT_B,
            miner: MinerConfig::default(),
            rating_threshold: DEFAULT_RATING_THRESHOLD,
            nbest_size: 20,
            mert: MertOptions::default(),
            loo_trials: DEFAULT_LOO_TRIALS,
            meteor: MeteorConfig::default(),
            seed,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl Settings {
    pub fn load(config: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = config {
            let f = File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            read_key_values(BufReader::new(f), |k, v| s.set(k, v))?;
        }
        if let Some(seed) = seed {
            s.seed = seed;
        }
        s.train.seed = s.seed;
        s.mert.seed = s.seed;
        s.validate()?;
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if key == "seed" {
            self.seed = parse(key, value)?;
            return Ok(true);
        }
        if self.train.set(key, value)? {
            return Ok(true);
        }
        match key {
            "min_bigram_count" => self.min_bigram_count = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "heldout_fraction" => self.heldout_fraction = parse(key, value)?,
            "bm25_k1" => self.bm25_k1 = parse(key, value)?,
            "bm25_b" => self.bm25_b = parse(key, value)?,
            "mine_candidates" => self.miner.candidates = parse(key, value)?,
            "mine_alpha" => self.miner.alpha = parse(key, value)?,
            "mine_epsilon" => self.miner.epsilon = parse(key, value)?,
            "rating_threshold" => self.rating_threshold = parse(key, value)?,
            "nbest_size" => self.nbest_size = parse(key, value)?,
            "mert_passes" => self.mert.passes = parse(key, value)?,
            "mert_restarts" => self.mert.restarts = parse(key, value)?,
            "loo_trials" => self.loo_trials = parse(key, value)?,
            "meteor_alpha" => self.meteor.alpha = parse(key, value)?,
            "meteor_beta" => self.meteor.beta = parse(key, value)?,
            "meteor_gamma" => self.meteor.gamma = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(true)
    }

    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.miner.validate()?;
        self.meteor.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return bad("heldout_fraction must be in [0, 1)");
        }
        if !(self.bm25_k1 >= 0.0) || !(0.0..=1.0).contains(&self.bm25_b) {
            return bad("bm25_k1 must be non-negative and bm25_b in [0, 1]");
        }
        if self.nbest_size == 0 || self.mert.passes == 0 || self.loo_trials == 0 {
            return bad("nbest_size, mert_passes and loo_trials must be positive");
        }
        Ok(())
    }

    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m: BTreeMap<String, String> =
            self.train.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let extra = [
            ("min_bigram_count", self.min_bigram_count.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("heldout_fraction", self.heldout_fraction.to_string()),
            ("bm25_k1", self.bm25_k1.to_string()),
            ("bm25_b", self.bm25_b.to_string()),
            ("mine_candidates", self.miner.candidates.to_string()),
            ("mine_alpha", self.miner.alpha.to_string()),
            ("mine_epsilon", self.miner.epsilon.to_string()),
            ("rating_threshold", self.rating_threshold.to_string()),
            ("nbest_size", self.nbest_size.to_string()),
            ("mert_passes", self.mert.passes.to_string()),
            ("mert_restarts", self.mert.restarts.to_string()),
            ("loo_trials", self.loo_trials.to_string()),
            ("meteor_alpha", self.meteor.alpha.to_string()),
            ("meteor_beta", self.meteor.beta.to_string()),
            ("meteor_gamma", self.meteor.gamma.to_string()),
        ];
        m.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
        m
    }
}
