//! Scenario file parsing: flat `key = value` UTF-8 text.
//!
//! Keys: n, L, J, K, P_db, p_prime_ratio, ensemble, ka_dist, eps_md, eps_fa,
//! mc_samples, seed, k_l, k_u, r_prime, tail_mass. Lines starting with `#`
//! are comments. Unknown keys are rejected by name.

use std::path::Path;

use crate::model::{
    CodebookEnsemble, ConfigError, ErrorTargets, KaDistribution, McConfig, Scenario,
};

/// `ka_dist` forms: `fixed(300)`, `binomial(1200,0.5)`, `pmf_file(path)`.
#[derive(Debug, Clone, PartialEq)]
pub enum KaDistSpec {
    Fixed(usize),
    Binomial { k: usize, p: f64 },
    PmfFile(String),
}

/// A parsed scenario file before pmf files are resolved against a base dir.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub n: usize,
    pub l: usize,
    pub j: u32,
    pub k: usize,
    pub p_db: Option<f64>,
    pub p_prime_ratio: Option<f64>,
    pub ensemble: CodebookEnsemble,
    pub ka_dist: KaDistSpec,
    pub eps_md: f64,
    pub eps_fa: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub k_l: Option<usize>,
    pub k_u: Option<usize>,
    pub r_prime: usize,
    pub tail_mass: Option<f64>,
}

pub fn parse_ka_dist(text: &str) -> Result<KaDistSpec, ConfigError> {
    let t = text.trim();
    let bad = |msg: &str| ConfigError::BadValue { key: "ka_dist".into(), msg: msg.into() };
    let (head, rest) = t.split_once('(').ok_or_else(|| bad("expected name(args)"))?;
    let args = rest.strip_suffix(')').ok_or_else(|| bad("missing closing paren"))?;
    match head.trim() {
        "fixed" => {
            let k = args.trim().parse::<usize>().map_err(|e| bad(&e.to_string()))?;
            Ok(KaDistSpec::Fixed(k))
        }
        "binomial" => {
            let (a, b) = args.split_once(',').ok_or_else(|| bad("expected binomial(K,p)"))?;
            let k = a.trim().parse::<usize>().map_err(|e| bad(&e.to_string()))?;
            let p = b.trim().parse::<f64>().map_err(|e| bad(&e.to_string()))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(bad(&format!("p = {p} out of [0,1]")));
            }
            Ok(KaDistSpec::Binomial { k, p })
        }
        "pmf_file" => Ok(KaDistSpec::PmfFile(args.trim().to_string())),
        other => Err(bad(&format!("unknown distribution `{other}`"))),
    }
}

/// A pmf file is one nonnegative weight per line, index 0 first; comments
/// with `#`. Values are normalized checks only, not rescaled.
pub fn parse_pmf(text: &str) -> Result<Vec<f64>, ConfigError> {
    let mut v = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let x = line.parse::<f64>().map_err(|e| ConfigError::BadValue {
            key: format!("pmf line {}", lineno + 1),
            msg: e.to_string(),
        })?;
        if !(x >= 0.0) || !x.is_finite() {
            return Err(ConfigError::BadValue {
                key: format!("pmf line {}", lineno + 1),
                msg: format!("weight {x} must be finite and nonnegative"),
            });
        }
        v.push(x);
    }
    if v.is_empty() {
        return Err(ConfigError::Invalid("pmf file has no entries".into()));
    }
    Ok(v)
}

pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, ConfigError> {
    let mut n = None;
    let mut l = None;
    let mut j = None;
    let mut k = None;
    let mut p_db = None;
    let mut p_prime_ratio = None;
    let mut ensemble = None;
    let mut ka_dist = None;
    let mut eps_md = None;
    let mut eps_fa = None;
    let mut mc_samples = None;
    let mut seed = None;
    let mut k_l = None;
    let mut k_u = None;
    let mut r_prime = None;
    let mut tail_mass = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: format!("line {}", lineno + 1),
            msg: "expected `key = value`".into(),
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |msg: String| ConfigError::BadValue { key: key.to_string(), msg };
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| bad(e.to_string()))?
            };
        }
        match key {
            "n" => n = Some(num!(usize)),
            "L" => l = Some(num!(usize)),
            "J" => j = Some(num!(u32)),
            "K" => k = Some(num!(usize)),
            "P_db" => p_db = Some(num!(f64)),
            "p_prime_ratio" => p_prime_ratio = Some(num!(f64)),
            "ensemble" => {
                ensemble = Some(match value {
                    "gaussian" => CodebookEnsemble::Gaussian,
                    "spherical" => CodebookEnsemble::Spherical,
                    other => return Err(bad(format!("unknown ensemble `{other}`"))),
                })
            }
            "ka_dist" => ka_dist = Some(parse_ka_dist(value)?),
            "eps_md" => eps_md = Some(num!(f64)),
            "eps_fa" => eps_fa = Some(num!(f64)),
            "mc_samples" => mc_samples = Some(num!(usize)),
            "seed" => seed = Some(num!(u64)),
            "k_l" => k_l = Some(num!(usize)),
            "k_u" => k_u = Some(num!(usize)),
            "r_prime" => r_prime = Some(num!(usize)),
            "tail_mass" => tail_mass = Some(num!(f64)),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
    }

    let require = |name: &str| ConfigError::Invalid(format!("missing required key `{name}`"));
    Ok(ScenarioSpec {
        n: n.ok_or_else(|| require("n"))?,
        l: l.ok_or_else(|| require("L"))?,
        j: j.ok_or_else(|| require("J"))?,
        k: k.ok_or_else(|| require("K"))?,
        p_db,
        p_prime_ratio,
        ensemble: ensemble.ok_or_else(|| require("ensemble"))?,
        ka_dist: ka_dist.ok_or_else(|| require("ka_dist"))?,
        eps_md: eps_md.ok_or_else(|| require("eps_md"))?,
        eps_fa: eps_fa.ok_or_else(|| require("eps_fa"))?,
        mc_samples: mc_samples.unwrap_or(2000),
        seed: seed.unwrap_or(0),
        k_l,
        k_u,
        r_prime: r_prime.unwrap_or(0),
        tail_mass,
    })
}

impl ScenarioSpec {
    /// Resolve pmf files (relative to `base_dir`) and validate.
    pub fn into_scenario(self, base_dir: &Path) -> Result<Scenario, ConfigError> {
        let ka_dist = match self.ka_dist {
            KaDistSpec::Fixed(k) => KaDistribution::Fixed(k),
            KaDistSpec::Binomial { k, p } => KaDistribution::Binomial { k, p },
            KaDistSpec::PmfFile(path) => {
                let full = base_dir.join(&path);
                let text = std::fs::read_to_string(&full).map_err(|e| ConfigError::BadValue {
                    key: "ka_dist".into(),
                    msg: format!("cannot read {}: {e}", full.display()),
                })?;
                KaDistribution::Pmf(parse_pmf(&text)?)
            }
        };
        let s = Scenario {
            n: self.n,
            l: self.l,
            j: self.j,
            k: self.k,
            power: self.p_db.map(|db| 10f64.powf(db / 10.0)),
            p_prime_ratio: self.p_prime_ratio,
            ensemble: self.ensemble,
            ka_dist,
            targets: ErrorTargets { eps_md: self.eps_md, eps_fa: self.eps_fa },
            mc: McConfig { samples: self.mc_samples, seed: self.seed, conservative: false },
            k_l: self.k_l,
            k_u: self.k_u,
            r_prime: self.r_prime,
            tail_mass: self.tail_mass,
        };
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# reduced acceptance scenario
n = 200
L = 16
J = 16
K = 40
P_db = -3.0
ensemble = spherical
ka_dist = binomial(40, 0.5)
eps_md = 0.01
eps_fa = 0.01
mc_samples = 500
seed = 42
";

    #[test]
    fn parses_sample() {
        let spec = parse_scenario(SAMPLE).unwrap();
        assert_eq!(spec.n, 200);
        assert_eq!(spec.ka_dist, KaDistSpec::Binomial { k: 40, p: 0.5 });
        assert_eq!(spec.r_prime, 0);
        let s = spec.into_scenario(Path::new(".")).unwrap();
        assert_eq!(s.k, 40);
        assert!(s.power.is_some());
    }

    #[test]
    fn rejects_unknown_key_by_name() {
        let text = format!("{SAMPLE}\nbogus_key = 3\n");
        match parse_scenario(&text) {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "bogus_key"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn rejects_spherical_with_reduced_power() {
        let text = format!("{SAMPLE}p_prime_ratio = 0.5\n");
        let spec = parse_scenario(&text).unwrap();
        assert!(matches!(
            spec.into_scenario(Path::new(".")),
            Err(ConfigError::SphericalPowerMismatch(_))
        ));
    }

    #[test]
    fn ka_dist_forms() {
        assert_eq!(parse_ka_dist("fixed(300)").unwrap(), KaDistSpec::Fixed(300));
        assert!(parse_ka_dist("binomial(10,1.5)").is_err());
        assert!(parse_ka_dist("zipf(3)").is_err());
        assert_eq!(
            parse_ka_dist("pmf_file(dist.txt)").unwrap(),
            KaDistSpec::PmfFile("dist.txt".into())
        );
    }

    #[test]
    fn pmf_text() {
        let v = parse_pmf("0.25\n0.5 # comment\n\n0.25\n").unwrap();
        assert_eq!(v, vec![0.25, 0.5, 0.25]);
        assert!(parse_pmf("0.5\n-0.1\n").is_err());
        assert!(parse_pmf("# nothing\n").is_err());
    }
}
