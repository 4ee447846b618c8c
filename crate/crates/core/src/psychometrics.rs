//! Two-down-one-up adaptive listening sessions, per-subject accuracy, the
//! subject-averaged response curve, and SNR₉₀ extraction by interpolation.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noise::SnrLadder;

/// Chance level of the 14-alternative consonant identification task.
pub const CHANCE_14AFC: f64 = 1.0 / 14.0;

/// Accuracy that defines SNR₉₀.
pub const TARGET_ACCURACY: f64 = 0.90;

/// Hard cap on presentations per session.
pub const MAX_TRIALS: usize = 200;

/// Number of completed loops between two adjacent levels that ends a session.
pub const LOOPS_TO_STOP: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub subject_id: String,
    pub token_id: String,
    pub snr_db: f64,
    pub correct: bool,
    pub presentation_index: usize,
}

/// Subject-averaged accuracy per SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub snr_db: Vec<f64>,
    pub p_correct: Vec<f64>,
    pub n_subjects: usize,
}

impl ResponseCurve {
    pub fn new(snr_db: Vec<f64>, p_correct: Vec<f64>, n_subjects: usize) -> Result<Self> {
        if snr_db.len() != p_correct.len() || snr_db.is_empty() {
            return Err(Error::InvalidParameter(
                "response curve needs equal-length, non-empty SNR and accuracy lists".into(),
            ));
        }
        if snr_db.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "response curve SNRs must be strictly increasing".into(),
            ));
        }
        if p_correct.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter(
                "response curve accuracies must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            snr_db,
            p_correct,
            n_subjects,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PsychometricShape {
    /// Chance-to-(1 − lapse) logistic with its midpoint at the threshold.
    #[default]
    Logistic,
    /// Deterministic: correct iff SNR >= threshold.
    Step,
}

/// A stand-in for a normal-hearing listener.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedListener {
    pub subject_id: String,
    #[serde(default)]
    pub shape: PsychometricShape,
    pub threshold_db: f64,
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default)]
    pub lapse_rate: f64,
    #[serde(default = "default_chance")]
    pub chance_level: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_slope() -> f64 {
    1.0
}

fn default_chance() -> f64 {
    CHANCE_14AFC
}

impl SimulatedListener {
    pub fn logistic(
        subject_id: impl Into<String>,
        threshold_db: f64,
        slope: f64,
        lapse_rate: f64,
        seed: u64,
    ) -> Self {
        Self {
            subject_id: subject_id.into(),
            shape: PsychometricShape::Logistic,
            threshold_db,
            slope,
            lapse_rate,
            chance_level: CHANCE_14AFC,
            seed,
        }
    }

    pub fn step(subject_id: impl Into<String>, threshold_db: f64) -> Self {
        Self {
            subject_id: subject_id.into(),
            shape: PsychometricShape::Step,
            threshold_db,
            slope: 1.0,
            lapse_rate: 0.0,
            chance_level: CHANCE_14AFC,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slope > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "listener {}: slope must be positive",
                self.subject_id
            )));
        }
        if !(0.0..=0.1).contains(&self.lapse_rate) {
            return Err(Error::InvalidParameter(format!(
                "listener {}: lapse rate must lie in [0, 0.1]",
                self.subject_id
            )));
        }
        if !(0.0..1.0).contains(&self.chance_level) || !self.threshold_db.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "listener {}: invalid chance level or threshold",
                self.subject_id
            )));
        }
        Ok(())
    }

    /// Probability of a correct identification at `snr_db`.
    pub fn p_correct(&self, snr_db: f64) -> f64 {
        match self.shape {
            PsychometricShape::Step => {
                if snr_db >= self.threshold_db {
                    1.0
                } else {
                    0.0
                }
            }
            PsychometricShape::Logistic => {
                let sigmoid = 1.0 / (1.0 + (-self.slope * (snr_db - self.threshold_db)).exp());
                self.chance_level + (1.0 - self.lapse_rate - self.chance_level) * sigmoid
            }
        }
    }

    /// SNR at which [`Self::p_correct`] equals `target`, if the curve reaches it.
    pub fn analytic_crossing(&self, target: f64) -> Option<f64> {
        match self.shape {
            PsychometricShape::Step => Some(self.threshold_db),
            PsychometricShape::Logistic => {
                let span = 1.0 - self.lapse_rate - self.chance_level;
                let s = (target - self.chance_level) / span;
                (s > 0.0 && s < 1.0).then(|| self.threshold_db + (s / (1.0 - s)).ln() / self.slope)
            }
        }
    }
}

/// Deterministic per-session seed from the master seed, subject and token.
pub fn derive_seed(master_seed: u64, subject_id: &str, token_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update((subject_id.len() as u64).to_le_bytes());
    h.update(subject_id.as_bytes());
    h.update(token_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Run one adaptive session.
///
/// After a correct response the level index drops by two, after an error it
/// rises by one, clamped to the ladder. A loop between adjacent levels `A` and
/// `A + 1` completes whenever an error at `A` is followed by a correct response
/// at `A + 1`; the session ends once any pair has completed
/// [`LOOPS_TO_STOP`] loops, or after [`MAX_TRIALS`] presentations.
pub fn staircase_session(
    listener: &SimulatedListener,
    ladder: &SnrLadder,
    start_level: usize,
    token_id: &str,
) -> Result<Vec<TrialRecord>> {
    listener.validate()?;
    if start_level >= ladder.len() {
        return Err(Error::InvalidParameter(format!(
            "start level {start_level} outside ladder of {} levels",
            ladder.len()
        )));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(listener.seed, &listener.subject_id, token_id));
    let mut loops = vec![0usize; ladder.len()];
    let mut trials: Vec<TrialRecord> = Vec::new();
    let mut level = start_level;
    while trials.len() < MAX_TRIALS {
        let snr_db = ladder.level(level);
        let correct = match listener.shape {
            PsychometricShape::Step => listener.p_correct(snr_db) >= 1.0,
            PsychometricShape::Logistic => rng.gen::<f64>() < listener.p_correct(snr_db),
        };
        if let Some(prev) = trials.last() {
            let prev_level = ladder
                .index_of(prev.snr_db)
                .expect("trial SNR is on the ladder");
            if !prev.correct && correct && level == prev_level + 1 {
                loops[prev_level] += 1;
            }
        }
        trials.push(TrialRecord {
            subject_id: listener.subject_id.clone(),
            token_id: token_id.to_string(),
            snr_db,
            correct,
            presentation_index: trials.len(),
        });
        if loops.iter().any(|&n| n >= LOOPS_TO_STOP) {
            break;
        }
        level = if correct {
            level.saturating_sub(2)
        } else {
            (level + 1).min(ladder.top())
        };
    }
    Ok(trials)
}

/// Fraction correct for one subject at one SNR, `None` when there were no trials.
pub fn subject_accuracy(trials: &[TrialRecord], subject_id: &str, snr_db: f64) -> Option<f64> {
    let (correct, total) = trials
        .iter()
        .filter(|t| t.subject_id == subject_id && t.snr_db == snr_db)
        .fold((0usize, 0usize), |(c, n), t| {
            (c + t.correct as usize, n + 1)
        });
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Unweighted mean over subjects of per-subject accuracy at each SNR. Subjects
/// with no trials at an SNR do not count toward that SNR's mean.
pub fn average_curve(trials: &[TrialRecord]) -> Result<ResponseCurve> {
    if trials.is_empty() {
        return Err(Error::InsufficientData("no trials to average".into()));
    }
    // (snr bits) -> subject -> (correct, total); BTreeMap keeps SNRs sorted
    // once keyed by an order-preserving integer.
    let mut table: BTreeMap<i64, BTreeMap<&str, (usize, usize)>> = BTreeMap::new();
    let mut subjects = BTreeSet::new();
    for t in trials {
        if !t.snr_db.is_finite() {
            return Err(Error::InvalidParameter("non-finite trial SNR".into()));
        }
        subjects.insert(t.subject_id.as_str());
        let cell = table
            .entry(order_key(t.snr_db))
            .or_default()
            .entry(t.subject_id.as_str())
            .or_default();
        cell.0 += t.correct as usize;
        cell.1 += 1;
    }
    let mut snr_db = Vec::with_capacity(table.len());
    let mut p_correct = Vec::with_capacity(table.len());
    for (key, per_subject) in &table {
        snr_db.push(from_order_key(*key));
        let sum: f64 = per_subject
            .values()
            .map(|&(c, n)| c as f64 / n as f64)
            .sum();
        p_correct.push(sum / per_subject.len() as f64);
    }
    ResponseCurve::new(snr_db, p_correct, subjects.len())
}

fn order_key(x: f64) -> i64 {
    let bits = x.to_bits() as i64;
    if bits < 0 {
        bits ^ i64::MAX
    } else {
        bits
    }
}

fn from_order_key(k: i64) -> f64 {
    let bits = if k < 0 { k ^ i64::MAX } else { k };
    f64::from_bits(bits as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snr90Estimate {
    pub snr90_db: f64,
    /// The curve was already at or above 0.90 at its lowest SNR.
    pub floor: bool,
}

/// SNR where the curve crosses 0.90.
///
/// The crossing is taken between the lowest SNR of the run of points at or
/// above 0.90 that extends to the top of the curve and the next lower SNR.
/// Isolated high scores below that run (from a handful of lucky presentations)
/// are ignored.
pub fn snr90_from_curve(curve: &ResponseCurve) -> Result<Snr90Estimate> {
    let p = &curve.p_correct;
    let s = &curve.snr_db;
    if p.is_empty() || *p.last().expect("non-empty") < TARGET_ACCURACY {
        return Err(Error::NoThreshold);
    }
    let mut lowest = p.len() - 1;
    while lowest > 0 && p[lowest - 1] >= TARGET_ACCURACY {
        lowest -= 1;
    }
    if lowest == 0 {
        return Ok(Snr90Estimate {
            snr90_db: s[0],
            floor: true,
        });
    }
    let (hi_s, hi_p) = (s[lowest], p[lowest]);
    let (lo_s, lo_p) = (s[lowest - 1], p[lowest - 1]);
    let snr90_db = hi_s - (hi_p - TARGET_ACCURACY) / (hi_p - lo_p) * (hi_s - lo_s);
    Ok(Snr90Estimate {
        snr90_db,
        floor: false,
    })
}

/// Full measurement for one token: sessions, curve and SNR₉₀.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snr90Measurement {
    pub token_id: String,
    pub estimate: Snr90Estimate,
    pub curve: ResponseCurve,
    #[serde(skip)]
    pub trials: Vec<TrialRecord>,
}

/// Run every listener through a session starting at the top of the ladder,
/// average the responses and extract SNR₉₀.
pub fn measure_snr90(
    token_id: &str,
    listeners: &[SimulatedListener],
    ladder: &SnrLadder,
) -> Result<Snr90Measurement> {
    if listeners.is_empty() {
        return Err(Error::InsufficientData("no listeners".into()));
    }
    let mut trials = Vec::new();
    for listener in listeners {
        trials.extend(staircase_session(listener, ladder, ladder.top(), token_id)?);
    }
    let curve = average_curve(&trials)?;
    let estimate = snr90_from_curve(&curve)?;
    Ok(Snr90Measurement {
        token_id: token_id.to_string(),
        estimate,
        curve,
        trials,
    })
}

/// `n` listeners cloned from `template`, with ids `s01..` and per-subject seeds
/// derived from `master_seed`.
pub fn cohort(template: &SimulatedListener, n: usize, master_seed: u64) -> Vec<SimulatedListener> {
    (0..n)
        .map(|i| {
            let subject_id = format!("s{:02}", i + 1);
            SimulatedListener {
                seed: derive_seed(master_seed, &subject_id, "cohort"),
                subject_id,
                ..template.clone()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indices(trials: &[TrialRecord], ladder: &SnrLadder) -> Vec<usize> {
        trials
            .iter()
            .map(|t| ladder.index_of(t.snr_db).unwrap())
            .collect()
    }

    fn trial(subject: &str, snr: f64, correct: bool) -> TrialRecord {
        TrialRecord {
            subject_id: subject.into(),
            token_id: "tok".into(),
            snr_db: snr,
            correct,
            presentation_index: 0,
        }
    }

    #[test]
    fn always_correct_walks_down_and_clamps() {
        let ladder = SnrLadder::default();
        let listener = SimulatedListener::step("s", -1e9);
        let trials = staircase_session(&listener, &ladder, 8, "tok").unwrap();
        let idx = indices(&trials, &ladder);
        assert_eq!(&idx[..6], &[8, 6, 4, 2, 0, 0]);
        assert_eq!(trials.len(), MAX_TRIALS);
        assert!(idx[4..].iter().all(|&i| i == 0));
    }

    #[test]
    fn always_wrong_walks_up_and_clamps() {
        let ladder = SnrLadder::default();
        let listener = SimulatedListener::step("s", 1e9);
        let trials = staircase_session(&listener, &ladder, 0, "tok").unwrap();
        let idx = indices(&trials, &ladder);
        assert_eq!(&idx[..10], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 8]);
        assert_eq!(trials.len(), MAX_TRIALS);
    }

    #[test]
    fn step_listener_loops_between_minus_12_and_minus_6() {
        // Hand simulation from 22 dB: 22c 12c 0c -12w -6c -18w -12w -6c -18w -12w -6c.
        let ladder = SnrLadder::default();
        let listener = SimulatedListener::step("s", -6.0);
        let trials = staircase_session(&listener, &ladder, 8, "tok").unwrap();
        assert_eq!(
            indices(&trials, &ladder),
            vec![8, 6, 4, 2, 3, 1, 2, 3, 1, 2, 3]
        );
        let last = &trials[trials.len() - 2..];
        assert_eq!((last[0].snr_db, last[0].correct), (-12.0, false));
        assert_eq!((last[1].snr_db, last[1].correct), (-6.0, true));
    }

    #[test]
    fn invalid_start_level() {
        let listener = SimulatedListener::step("s", 0.0);
        assert!(staircase_session(&listener, &SnrLadder::default(), 9, "tok").is_err());
    }

    #[test]
    fn sessions_are_reproducible() {
        let ladder = SnrLadder::default();
        let l = SimulatedListener::logistic("s07", -10.0, 1.0, 0.02, 42);
        let a = staircase_session(&l, &ladder, 8, "f103_pa").unwrap();
        let b = staircase_session(&l, &ladder, 8, "f103_pa").unwrap();
        assert_eq!(a, b);
        let c = staircase_session(&l, &ladder, 8, "f105_pa").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn subject_accuracy_examples() {
        let mut trials: Vec<_> = (0..10).map(|i| trial("a", 6.0, i < 9)).collect();
        trials.extend((0..5).map(|_| trial("a", -6.0, false)));
        assert_eq!(subject_accuracy(&trials, "a", 6.0), Some(0.9));
        assert_eq!(subject_accuracy(&trials, "a", -6.0), Some(0.0));
        assert_eq!(subject_accuracy(&trials, "a", 0.0), None);
        assert_eq!(subject_accuracy(&trials, "b", 6.0), None);
    }

    #[test]
    fn average_curve_examples() {
        let mut trials = vec![trial("a", 0.0, true)];
        trials.extend((0..5).map(|i| trial("b", 0.0, i < 4)));
        let curve = average_curve(&trials).unwrap();
        assert_eq!(curve.snr_db, vec![0.0]);
        assert!((curve.p_correct[0] - 0.9).abs() < 1e-12);
        assert_eq!(curve.n_subjects, 2);

        // Subject b has no data at -6: the -6 mean is a's alone.
        trials.push(trial("a", -6.0, false));
        trials.push(trial("a", -6.0, true));
        let curve = average_curve(&trials).unwrap();
        assert_eq!(curve.snr_db, vec![-6.0, 0.0]);
        assert_eq!(curve.p_correct[0], 0.5);

        assert!(average_curve(&[]).is_err());
    }

    #[test]
    fn single_subject_curve_equals_subject_accuracy() {
        let trials = vec![
            trial("a", -12.0, false),
            trial("a", -6.0, true),
            trial("a", -6.0, false),
            trial("a", 22.0, true),
        ];
        let curve = average_curve(&trials).unwrap();
        for (s, p) in curve.snr_db.iter().zip(&curve.p_correct) {
            assert_eq!(Some(*p), subject_accuracy(&trials, "a", *s));
        }
    }

    #[test]
    fn snr90_interpolation_examples() {
        let curve = ResponseCurve::new(vec![-12.0, -6.0], vec![0.50, 0.95], 30).unwrap();
        let est = snr90_from_curve(&curve).unwrap();
        assert!((est.snr90_db - (-6.0 - 0.05 / 0.45 * 6.0)).abs() < 1e-12);
        assert!((est.snr90_db + 6.667).abs() < 1e-3);
        assert!(!est.floor);

        let exact = ResponseCurve::new(vec![-6.0, 0.0, 6.0], vec![0.4, 0.90, 1.0], 1).unwrap();
        assert_eq!(snr90_from_curve(&exact).unwrap().snr90_db, 0.0);

        let never = ResponseCurve::new(vec![-6.0, 0.0], vec![0.2, 0.8], 1).unwrap();
        assert!(matches!(snr90_from_curve(&never), Err(Error::NoThreshold)));

        let floor = ResponseCurve::new(vec![-22.0, 0.0], vec![0.95, 1.0], 1).unwrap();
        assert_eq!(
            snr90_from_curve(&floor).unwrap(),
            Snr90Estimate {
                snr90_db: -22.0,
                floor: true
            }
        );
    }

    #[test]
    fn measure_with_step_listeners() {
        // Every subject scores 1.0 at -6 dB and 0.0 at -12 dB, so the crossing
        // sits one tenth of the 6 dB gap below -6 dB.
        let listeners: Vec<_> = (0..30)
            .map(|i| SimulatedListener::step(format!("s{i}"), -6.0))
            .collect();
        let m = measure_snr90("tok", &listeners, &SnrLadder::default()).unwrap();
        assert!((m.estimate.snr90_db - (-6.6)).abs() < 1e-12);
        assert!(measure_snr90("tok", &[], &SnrLadder::default()).is_err());
    }

    #[test]
    fn logistic_analytic_crossing() {
        let l = SimulatedListener::logistic("s", -10.0, 1.0, 0.02, 0);
        let x = l.analytic_crossing(0.9).unwrap();
        assert!((l.p_correct(x) - 0.9).abs() < 1e-12);
        assert!(l.analytic_crossing(0.99).is_none());
    }

    #[test]
    fn order_key_round_trips_and_sorts() {
        let xs = [-22.0, -6.5, -0.0, 0.0, 6.0, 22.0];
        for w in xs.windows(2) {
            assert!(order_key(w[0]) <= order_key(w[1]));
        }
        for x in xs {
            assert_eq!(from_order_key(order_key(x)), x);
        }
    }

    proptest::proptest! {
        #[test]
        fn staircase_transitions_obey_the_rule(seed in 0u64..10_000, thr in -25.0f64..25.0, start in 0usize..9) {
            let ladder = SnrLadder::default();
            let l = SimulatedListener::logistic("s", thr, 0.7, 0.05, seed);
            let trials = staircase_session(&l, &ladder, start, "tok").unwrap();
            proptest::prop_assert!(trials.len() <= MAX_TRIALS);
            for w in trials.windows(2) {
                let a = ladder.index_of(w[0].snr_db).unwrap() as isize;
                let b = ladder.index_of(w[1].snr_db).unwrap() as isize;
                let expected = if w[0].correct { (a - 2).max(0) } else { (a + 1).min(8) };
                proptest::prop_assert_eq!(b, expected);
            }
        }

        #[test]
        fn snr90_is_monotone_in_accuracy(
            ps in proptest::collection::vec(0.0f64..=1.0, 9),
            which in 0usize..9,
            bump in 0.0f64..0.5,
        ) {
            let ladder = SnrLadder::default();
            let base = ResponseCurve::new(ladder.levels_db.clone(), ps.clone(), 1).unwrap();
            let mut raised = ps.clone();
            raised[which] = (raised[which] + bump).min(1.0);
            let raised = ResponseCurve::new(ladder.levels_db.clone(), raised, 1).unwrap();
            if let Ok(before) = snr90_from_curve(&base) {
                let after = snr90_from_curve(&raised).unwrap();
                proptest::prop_assert!(after.snr90_db <= before.snr90_db + 1e-12);
            }
        }

        #[test]
        fn snr90_matches_piecewise_linear_crossing(thr in -20.0f64..20.0, slope in 0.05f64..0.5) {
            // Noiseless monotone accuracy sampled on the ladder.
            let ladder = SnrLadder::default();
            let f = |x: f64| (0.9 + slope * (x - thr) / 10.0).clamp(0.0, 1.0);
            let ps: Vec<f64> = ladder.levels_db.iter().map(|&x| f(x)).collect();
            let curve = ResponseCurve::new(ladder.levels_db.clone(), ps.clone(), 1).unwrap();
            let Ok(est) = snr90_from_curve(&curve) else { return Ok(()); };
            if est.floor { return Ok(()); }
            // Analytic crossing of the interpolant: first segment reaching 0.9.
            let mut expected = None;
            for i in 1..ps.len() {
                if ps[i - 1] < 0.9 && ps[i] >= 0.9 {
                    let (x0, x1) = (ladder.levels_db[i - 1], ladder.levels_db[i]);
                    expected = Some(x0 + (0.9 - ps[i - 1]) / (ps[i] - ps[i - 1]) * (x1 - x0));
                }
            }
            proptest::prop_assert!((est.snr90_db - expected.unwrap()).abs() < 1e-9);
        }

        #[test]
        fn averaged_curve_is_bounded_by_subject_extremes(
            outcomes in proptest::collection::vec((0usize..4, 0usize..3, proptest::bool::ANY), 1..60),
        ) {
            let snrs = [-6.0, 0.0, 6.0];
            let trials: Vec<_> = outcomes
                .iter()
                .map(|&(s, l, c)| trial(&format!("s{s}"), snrs[l], c))
                .collect();
            let curve = average_curve(&trials).unwrap();
            for (snr, p) in curve.snr_db.iter().zip(&curve.p_correct) {
                proptest::prop_assert!((0.0..=1.0).contains(p));
                let max = (0..4)
                    .filter_map(|s| subject_accuracy(&trials, &format!("s{s}"), *snr))
                    .fold(0.0f64, f64::max);
                proptest::prop_assert!(*p <= max + 1e-12);
            }
        }
    }
}
