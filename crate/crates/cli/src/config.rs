use std::path::Path;

use cemmaf_core::{kv, PnHyperParams, PpHyperParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Hyperparameters for a run. Defaults are the published settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kappa: f64,
    pub gamma: f64,
    pub beta_pn: f64,
    pub eta: f64,
    pub nu: f64,
    pub beta_pp: f64,
    pub c0: f64,
    pub rounds: usize,
    pub iters_pn: usize,
    pub iters_pp: usize,
    pub step: f64,
    pub n_superpixels: usize,
    pub background: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kappa: 5.0,
            gamma: 100.0,
            beta_pn: 100.0,
            eta: 1.0,
            nu: 1.0,
            beta_pp: 0.1,
            c0: 1.0,
            rounds: 9,
            iters_pn: 1000,
            iters_pp: 100,
            step: 0.01,
            n_superpixels: 200,
            background: 0.0,
            seed: 7,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for e in kv::parse(text)? {
            match e.key.as_str() {
                "kappa" => cfg.kappa = e.parse_f64()?,
                "gamma" => cfg.gamma = e.parse_f64()?,
                "beta_pn" => cfg.beta_pn = e.parse_f64()?,
                "eta" => cfg.eta = e.parse_f64()?,
                "nu" => cfg.nu = e.parse_f64()?,
                "beta_pp" => cfg.beta_pp = e.parse_f64()?,
                "c0" => cfg.c0 = e.parse_f64()?,
                "rounds" => cfg.rounds = e.parse_value()?,
                "iters_pn" => cfg.iters_pn = e.parse_value()?,
                "iters_pp" => cfg.iters_pp = e.parse_value()?,
                "step" => cfg.step = e.parse_f64()?,
                "n_superpixels" => cfg.n_superpixels = e.parse_value()?,
                "background" => cfg.background = e.parse_f64()?,
                "seed" => cfg.seed = e.parse_value()?,
                _ => return Err(e.unknown().into()),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.pn_params().validate()?;
        self.pp_params().validate()?;
        if self.n_superpixels == 0 {
            return Err(CliError::Usage("n_superpixels must be at least 1".into()));
        }
        Ok(())
    }

    pub fn pn_params(&self) -> PnHyperParams {
        PnHyperParams {
            kappa: self.kappa,
            gamma: self.gamma,
            beta: self.beta_pn,
            eta: self.eta,
            nu: self.nu,
            c0: self.c0,
            rounds: self.rounds,
            iters: self.iters_pn,
            step: self.step,
        }
    }

    pub fn pp_params(&self) -> PpHyperParams {
        PpHyperParams {
            kappa: self.kappa,
            gamma: self.gamma,
            beta: self.beta_pp,
            c0: self.c0,
            rounds: self.rounds,
            iters: self.iters_pp,
            step: self.step,
            background: self.background,
        }
    }

    /// Same `key = value` layout that [`RunConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        format!(
            "kappa = {:?}\ngamma = {:?}\nbeta_pn = {:?}\neta = {:?}\nnu = {:?}\nbeta_pp = {:?}\n\
             c0 = {:?}\nrounds = {}\niters_pn = {}\niters_pp = {}\nstep = {:?}\n\
             n_superpixels = {}\nbackground = {:?}\nseed = {}\n",
            self.kappa,
            self.gamma,
            self.beta_pn,
            self.eta,
            self.nu,
            self.beta_pp,
            self.c0,
            self.rounds,
            self.iters_pn,
            self.iters_pp,
            self.step,
            self.n_superpixels,
            self.background,
            self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_defaults() {
        let cfg = RunConfig::parse("# tuned\nkappa = 1.5\niters_pp = 10\n").unwrap();
        assert_eq!(cfg.kappa, 1.5);
        assert_eq!(cfg.iters_pp, 10);
        assert_eq!(cfg.gamma, 100.0);
        assert_eq!(cfg.pn_params().kappa, 1.5);
        assert_eq!(cfg.pp_params().iters, 10);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("kapa = 5").unwrap_err().to_string();
        assert!(err.contains("kapa"), "{err}");
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(RunConfig::parse("step = 0").is_err());
        assert!(RunConfig::parse("rounds = 0").is_err());
        assert!(RunConfig::parse("background = 1.5").is_err());
        assert!(RunConfig::parse("kappa = -1").is_err());
        assert!(RunConfig::parse("n_superpixels = 0").is_err());
        assert!(RunConfig::parse("rounds = -3").is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            beta_pp: 0.25,
            seed: 99,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }
}
