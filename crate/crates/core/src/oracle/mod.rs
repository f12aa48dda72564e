//! Exact checks of the optimal-discriminator and fixed-point results on
//! finite sample spaces.
//!
//! Joint distributions live on `Z × X`, atom `(z, x)` at index `z·n + x`.
//! Every pushforward places the latent coordinate first, so `(X, E(X))` is
//! stored as the pair `(E(x), x)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand::SeedableRng;

use crate::{Rng, Scalar};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("unknown pushforward descriptor {0:?}")]
    UnknownDescriptor(String),
    #[error("unknown loss family {0:?}")]
    UnknownFamily(String),
    #[error("invalid game: {0}")]
    InvalidGame(String),
    #[error("the (X, E(X)) pushforward needs a tabular P_X")]
    MissingDataMass,
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Deterministic maps between finite `Z = {0..m}` and `X = {0..n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularGame<T> {
    pub p_z: Vec<T>,
    /// Data mass on `X`; only the BiGAN family reads it.
    pub p_x: Option<Vec<T>>,
    pub n_x: usize,
    /// `G(z)` for every `z`.
    pub g: Vec<usize>,
    /// `E(x)` for every `x`.
    pub e: Vec<usize>,
}

fn check_mass<T: Scalar>(p: &[T], what: &str) -> Result<()> {
    let total = p.iter().copied().sum::<T>().to_f64_lossy();
    if p.iter().any(|&v| !(v >= T::zero())) || (total - 1.0).abs() > 1e-12 {
        return Err(OracleError::InvalidGame(format!("{what} must be a probability vector, sums to {total}")));
    }
    Ok(())
}

impl<T: Scalar> TabularGame<T> {
    pub fn new(p_z: Vec<T>, p_x: Option<Vec<T>>, g: Vec<usize>, e: Vec<usize>) -> Result<Self> {
        let (m, n) = (p_z.len(), e.len());
        if m == 0 || n == 0 || g.len() != m {
            return Err(OracleError::InvalidGame(format!("|Z| = {m}, |X| = {n}, |G| = {}", g.len())));
        }
        check_mass(&p_z, "p_z")?;
        if let Some(px) = &p_x {
            if px.len() != n {
                return Err(OracleError::InvalidGame(format!("p_x has {} atoms, X has {n}", px.len())));
            }
            check_mass(px, "p_x")?;
        }
        if g.iter().any(|&x| x >= n) || e.iter().any(|&z| z >= m) {
            return Err(OracleError::InvalidGame("map index out of range".into()));
        }
        Ok(Self { p_z, p_x, n_x: n, g, e })
    }

    pub fn m(&self) -> usize {
        self.p_z.len()
    }

    /// Size of the joint support `Z × X`.
    pub fn atoms(&self) -> usize {
        self.m() * self.n_x
    }

    fn at(&self, z: usize, x: usize) -> usize {
        z * self.n_x + x
    }

    /// Exact mass function of a pushforward on `Z × X`.
    pub fn pushforward(&self, which: Descriptor) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.atoms()];
        match which {
            Descriptor::XEx => {
                let px = self.p_x.as_ref().ok_or(OracleError::MissingDataMass)?;
                for (x, &p) in px.iter().enumerate() {
                    let i = self.at(self.e[x], x);
                    out[i] = out[i] + p;
                }
            }
            _ => {
                for (z, &p) in self.p_z.iter().enumerate() {
                    let x = self.g[z];
                    let (zz, xx) = match which {
                        Descriptor::ZGz => (z, x),
                        Descriptor::EGzGz => (self.e[x], x),
                        Descriptor::ZGEGz => (z, self.g[self.e[x]]),
                        Descriptor::XEx => unreachable!(),
                    };
                    let i = self.at(zz, xx);
                    out[i] = out[i] + p;
                }
            }
        }
        Ok(out)
    }

    /// `P_G` on `X`.
    pub fn generated_mass(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_x];
        for (z, &p) in self.p_z.iter().enumerate() {
            out[self.g[z]] = out[self.g[z]] + p;
        }
        out
    }

    /// The (real, fake) pair a family's discriminator separates.
    pub fn family_pair(&self, family: Family) -> Result<(Vec<T>, Vec<T>)> {
        Ok(match family {
            Family::AdvZ => (self.pushforward(Descriptor::ZGz)?, self.pushforward(Descriptor::EGzGz)?),
            Family::AdvX => (self.pushforward(Descriptor::ZGz)?, self.pushforward(Descriptor::ZGEGz)?),
            Family::Bigan => (self.pushforward(Descriptor::XEx)?, self.pushforward(Descriptor::ZGz)?),
        })
    }

    /// A random game with `m` latent and `n` data atoms. Some masses are
    /// zeroed so off-support atoms get exercised.
    pub fn random(m: usize, n: usize, rng: &mut Rng) -> Self {
        let mass = |k: usize, rng: &mut Rng| {
            let mut w: Vec<f64> = (0..k).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() + 1e-3 }).collect();
            if w.iter().all(|&v| v == 0.0) {
                w[0] = 1.0;
            }
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| T::lit(v / s)).collect::<Vec<T>>()
        };
        let p_z = mass(m, rng);
        let p_x = mass(n, rng);
        let g = (0..m).map(|_| rng.random_range(0..n)).collect();
        let e = (0..n).map(|_| rng.random_range(0..m)).collect();
        Self { p_z, p_x: Some(p_x), n_x: n, g, e }
    }
}

/// The joint distributions the games compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Descriptor {
    /// `(Z, G(Z))`
    ZGz,
    /// `(E(G(Z)), G(Z))`
    EGzGz,
    /// `(Z, G(E(G(Z))))`
    ZGEGz,
    /// `(X, E(X))` under the tabular `P_X`
    XEx,
}

impl FromStr for Descriptor {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace(' ', "").as_str() {
            "(Z,G(Z))" => Ok(Descriptor::ZGz),
            "(E(G(Z)),G(Z))" => Ok(Descriptor::EGzGz),
            "(Z,G(E(G(Z))))" => Ok(Descriptor::ZGEGz),
            "(X,E(X))" => Ok(Descriptor::XEx),
            _ => Err(OracleError::UnknownDescriptor(s.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    AdvZ,
    AdvX,
    Bigan,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::AdvZ, Family::AdvX, Family::Bigan];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::AdvZ => "adv-Z",
            Family::AdvX => "adv-X",
            Family::Bigan => "biGAN",
        })
    }
}

impl FromStr for Family {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adv-Z" | "adv-z" => Ok(Family::AdvZ),
            "adv-X" | "adv-x" => Ok(Family::AdvX),
            "biGAN" | "bigan" => Ok(Family::Bigan),
            _ => Err(OracleError::UnknownFamily(s.into())),
        }
    }
}

/// `P/(P+Q)` per atom; `None` where both masses vanish.
pub fn optimal_discriminator<T: Scalar>(p: &[T], q: &[T]) -> Vec<Option<T>> {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a + b > T::zero()).then(|| a / (a + b)))
        .collect()
}

/// `a·ln(a/b)` with `0·ln 0 = 0`.
fn xlogy_ratio<T: Scalar>(a: T, b: T) -> T {
    if a == T::zero() {
        T::zero()
    } else {
        a * (a / b).ln()
    }
}

/// Jensen–Shannon divergence in nats.
pub fn js_divergence<T: Scalar>(p: &[T], q: &[T]) -> T {
    let half = T::lit(0.5);
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = (a + b) * half;
            half * (xlogy_ratio(a, m) + xlogy_ratio(b, m))
        })
        .sum()
}

/// Discriminator loss `−E_P[ln D] − E_Q[ln(1 − D)]` of a tabular `D`.
/// Atoms without mass contribute nothing; an infinite loss means `D` is
/// certain and wrong somewhere.
pub fn disc_loss<T: Scalar>(p: &[T], q: &[T], d: &[Option<T>]) -> T {
    p.iter()
        .zip(q)
        .zip(d)
        .map(|((&a, &b), &d)| match d {
            None => T::zero(),
            Some(d) => {
                let real = if a == T::zero() { T::zero() } else { -a * d.ln() };
                let fake = if b == T::zero() { T::zero() } else { -b * (T::one() - d).ln() };
                real + fake
            }
        })
        .sum()
}

/// `|loss(D*) − (ln 4 − 2·JS(P‖Q))|` for one loss family.
pub fn verify_value_identity<T: Scalar>(game: &TabularGame<T>, family: Family) -> Result<T> {
    let (p, q) = game.family_pair(family)?;
    let value = disc_loss(&p, &q, &optimal_discriminator(&p, &q));
    let expect = T::lit(4f64.ln()) - T::lit(2.0) * js_divergence(&p, &q);
    Ok((value - expect).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Theorem {
    /// Zero JS between `(Z, G(Z))` and `(E(G(Z)), G(Z))` iff `E∘G = id` on `supp P_Z`.
    LatentInverse,
    /// Zero JS between `(Z, G(Z))` and `(Z, G(E(G(Z))))` iff `G∘E = id` on `supp P_G`.
    DataInverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointReport<T> {
    pub js: T,
    /// Atoms where the inverse fails: latent atoms for
    /// [`Theorem::LatentInverse`], data atoms for [`Theorem::DataInverse`].
    pub violating: Vec<usize>,
    /// Whether `js = 0` and `violating = ∅` agree.
    pub holds: bool,
}

pub fn verify_fixed_point<T: Scalar>(game: &TabularGame<T>, theorem: Theorem) -> FixedPointReport<T> {
    let (q, violating) = match theorem {
        Theorem::LatentInverse => {
            let r = (0..game.m())
                .filter(|&z| game.p_z[z] > T::zero() && game.e[game.g[z]] != z)
                .collect();
            (game.pushforward(Descriptor::EGzGz).expect("latent-side pushforward"), r)
        }
        Theorem::DataInverse => {
            let pg = game.generated_mass();
            let r = (0..game.n_x)
                .filter(|&x| pg[x] > T::zero() && game.g[game.e[x]] != x)
                .collect();
            (game.pushforward(Descriptor::ZGEGz).expect("latent-side pushforward"), r)
        }
    };
    let p = game.pushforward(Descriptor::ZGz).expect("latent-side pushforward");
    let js = js_divergence(&p, &q);
    let holds = (js == T::zero()) == Vec::is_empty(&violating);
    FixedPointReport { js, violating, holds }
}

/// One line of the verification suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst residual, or the number of failures for counting checks.
    pub residual: f64,
    pub pass: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.pass { "ok  " } else { "FAIL" };
        write!(f, "{mark} {:<44} {:.3e}", self.name, self.residual)
    }
}

pub const VALUE_TOL: f64 = 1e-12;

/// Every property on `games` random games plus exhaustive `m = n = 3` enumeration.
pub fn run_suite(seed: u64, games: usize, probes: usize) -> Vec<Check> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    let mut optimality_failures = 0usize;
    let mut js_worst = 0.0f64;
    for _ in 0..games {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let game = TabularGame::<f64>::random(m, n, &mut rng);
        for (w, family) in worst.iter_mut().zip(Family::ALL) {
            *w = w.max(verify_value_identity(&game, family).expect("random games carry P_X"));
            let (p, q) = game.family_pair(family).expect("random games carry P_X");
            let best = disc_loss(&p, &q, &optimal_discriminator(&p, &q));
            for _ in 0..probes {
                let d: Vec<Option<f64>> = (0..p.len()).map(|_| Some(rng.random_range(1e-6..1.0 - 1e-6))).collect();
                if disc_loss(&p, &q, &d) < best - VALUE_TOL {
                    optimality_failures += 1;
                }
            }
            let js = js_divergence(&p, &q);
            let bound_gap = (-js).max(js - 2f64.ln()).max((js - js_divergence(&q, &p)).abs());
            js_worst = js_worst.max(bound_gap.max(0.0));
            if (js == 0.0) != (p == q) {
                js_worst = f64::INFINITY;
            }
        }
    }
    let mut checks: Vec<Check> = Family::ALL
        .iter()
        .zip(worst)
        .map(|(f, w)| Check { name: format!("value identity ({f}), {games} games"), residual: w, pass: w < VALUE_TOL })
        .collect();
    checks.push(Check {
        name: format!("D* optimal against {probes} random D per game"),
        residual: optimality_failures as f64,
        pass: optimality_failures == 0,
    });
    checks.push(Check { name: "JS in [0, ln 2], symmetric, zero iff equal".into(), residual: js_worst, pass: js_worst <= 1e-15 });
    for (theorem, name) in [(Theorem::LatentInverse, "latent-inverse fixed point, all maps m=n=3"), (Theorem::DataInverse, "data-inverse fixed point, all maps m=n=3")] {
        let failures = exhaustive_failures(theorem);
        checks.push(Check { name: name.into(), residual: failures as f64, pass: failures == 0 });
    }
    checks
}

/// Counterexamples to a theorem's equivalence over all `(G, E)` pairs at
/// `m = n = 3`, under a uniform prior and one with a massless atom.
pub fn exhaustive_failures(theorem: Theorem) -> usize {
    let maps: Vec<Vec<usize>> = (0..27).map(|k| vec![k % 3, k / 3 % 3, k / 9]).collect();
    let priors = [vec![1.0 / 3.0; 3], vec![0.5, 0.5, 0.0]];
    let mut failures = 0;
    for p_z in &priors {
        for g in &maps {
            for e in &maps {
                let game = TabularGame::new(p_z.clone(), None, g.clone(), e.clone()).expect("valid enumeration");
                if !verify_fixed_point(&game, theorem).holds {
                    failures += 1;
                }
            }
        }
    }
    failures
}
