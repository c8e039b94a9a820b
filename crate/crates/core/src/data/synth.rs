use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::pipeline::{build_vocab, split_train_test, to_user_trail, PrepareSummary, PreparedData, RawTrail};
use super::recsys::format_timestamp;
use super::{RawEvent, SourceTag};
use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

const HOUR: f64 = 3600.0;

/// A planted event type whose effect on the conversion log-odds is
/// `theta - mu * dt_hours`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub key: String,
    pub theta: f64,
    /// Per hour.
    pub mu: f64,
    /// Outcome class the signal raises (1 in binary mode).
    #[serde(default = "one")]
    pub task: usize,
}

fn one() -> usize {
    1
}

/// Synthetic trail generator settings.
///
/// Each trail has `min_len..=max_len` events spread uniformly over a window
/// whose length is log-uniform in `window_hours`. The prediction is served a
/// uniform `horizon_hours` draw after the window closes. With probability `signal_rate` one
/// event (at a uniform position) is replaced by a signal type chosen
/// uniformly; all other events are uniform background noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_trails: usize,
    pub noise_types: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub window_hours: [f64; 2],
    pub horizon_hours: [f64; 2],
    pub signal_rate: f64,
    /// Base log-odds of each converting class.
    pub bias: f64,
    pub num_tasks: usize,
    pub signals: Vec<SignalSpec>,
    pub start_time: f64,
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_trails: 20_000,
            noise_types: 50,
            min_len: 5,
            max_len: 20,
            window_hours: [1.0, 1.0],
            horizon_hours: [0.0, 4.0],
            signal_rate: 0.5,
            bias: -3.0,
            num_tasks: 1,
            signals: vec![SignalSpec {
                key: "signal".into(),
                theta: 4.0,
                mu: 1.0,
                task: 1,
            }],
            // 2014-04-01T00:00:00Z
            start_time: 1_396_310_400.0,
            test_fraction: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.signals.is_empty() {
            return fail("synthetic spec needs at least one signal type".into());
        }
        if self.num_trails == 0 || self.noise_types == 0 {
            return fail("num_trails and noise_types must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        let [lo, hi] = self.window_hours;
        let [h_lo, h_hi] = self.horizon_hours;
        if !(lo > 0.0 && lo <= hi) || !(h_lo >= 0.0 && h_lo <= h_hi) {
            return fail(format!("bad window {lo}..{hi} or horizon {h_lo}..{h_hi}"));
        }
        if !(0.0..=1.0).contains(&self.signal_rate) {
            return fail(format!(
                "signal_rate must lie in [0, 1], got {}",
                self.signal_rate
            ));
        }
        let k = self.num_tasks.max(2);
        for s in &self.signals {
            if s.task == 0 || s.task >= k {
                return fail(format!(
                    "signal {} targets class {} outside 1..{k}",
                    s.key, s.task
                ));
            }
            if s.key.starts_with("noise_") {
                return fail(format!("signal key {} collides with noise keys", s.key));
            }
        }
        Ok(())
    }

    fn noise_key(i: usize) -> String {
        format!("noise_{i:03}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTruth {
    pub key: String,
    pub theta: f64,
    pub mu: f64,
    pub task: usize,
    pub vocab_id: Option<usize>,
}

/// Planted parameters; `mu` is per `time_unit` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bias: f64,
    pub time_unit: f64,
    pub signals: Vec<SignalTruth>,
    pub expected_positive_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub trails: Vec<RawTrail>,
    pub truth: GroundTruth,
}

fn sample_class(rng: &mut impl Rng, logits: &[f64]) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    logits.len() - 1
}

/// Generates labeled raw trails together with the planted parameters.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = spec.num_tasks.max(2);
    let (ln_lo, ln_hi) = (spec.window_hours[0].ln(), spec.window_hours[1].ln());
    let mut trails = Vec::with_capacity(spec.num_trails);
    for n in 0..spec.num_trails {
        let id = format!("t{n:07}");
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let window = (ln_lo + (ln_hi - ln_lo) * rng.random::<f64>()).exp() * HOUR;
        let end = spec.start_time + n as f64 * 60.0 + window;
        let [h_lo, h_hi] = spec.horizon_hours;
        let prediction_time = end + (h_lo + (h_hi - h_lo) * rng.random::<f64>()) * HOUR;
        let mut times: Vec<f64> = (0..len).map(|_| end - window * rng.random::<f64>()).collect();
        times.sort_by(f64::total_cmp);
        let mut keys: Vec<String> = (0..len)
            .map(|_| SynthSpec::noise_key(rng.random_range(0..spec.noise_types)))
            .collect();
        let mut logits = vec![0.0; classes];
        for l in logits.iter_mut().skip(1) {
            *l = spec.bias;
        }
        if rng.random::<f64>() < spec.signal_rate {
            let pos = rng.random_range(0..len);
            let s = &spec.signals[rng.random_range(0..spec.signals.len())];
            keys[pos] = s.key.clone();
            let dt = (prediction_time - times[pos]) / HOUR;
            logits[s.task] += s.theta - s.mu * dt;
        }
        let label = sample_class(&mut rng, &logits);
        let events = keys
            .into_iter()
            .zip(times)
            .map(|(key, timestamp)| RawEvent {
                session_id: id.clone(),
                timestamp,
                key,
                source: SourceTag::Other,
            })
            .collect();
        trails.push(RawTrail {
            id,
            events,
            label,
            prediction_time,
        });
    }
    let truth = GroundTruth {
        bias: spec.bias,
        time_unit: HOUR,
        signals: spec
            .signals
            .iter()
            .map(|s| SignalTruth {
                key: s.key.clone(),
                theta: s.theta,
                mu: s.mu,
                task: s.task,
                vocab_id: None,
            })
            .collect(),
        expected_positive_rate: expected_positive_rate(spec).ok(),
    };
    Ok(SynthData { trails, truth })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean of `S(a - mu * dt)` for `dt` uniform on `[h, h + w]`.
fn mean_sigmoid_uniform(a: f64, mu: f64, h: f64, w: f64) -> f64 {
    if mu.abs() * w < 1e-9 {
        return sigmoid(a - mu * (h + w / 2.0));
    }
    (softplus(a - mu * h) - softplus(a - mu * (h + w))) / (mu * w)
}

/// Analytic conversion rate of a binary spec. The inner expectation over the
/// signal's position in the window is closed-form; window length and horizon
/// are integrated with the midpoint rule.
pub fn expected_positive_rate(spec: &SynthSpec) -> Result<f64> {
    spec.validate()?;
    if spec.num_tasks > 1 {
        return Err(Error::Config(
            "analytic rate is only available in binary mode".into(),
        ));
    }
    let [lo, hi] = spec.window_hours;
    let [h_lo, h_hi] = spec.horizon_hours;
    let w_steps = if lo == hi { 1 } else { 400 };
    let h_steps = if h_lo == h_hi { 1 } else { 400 };
    let mut signal_part = 0.0;
    for s in &spec.signals {
        let mut acc = 0.0;
        for i in 0..w_steps {
            let w = (lo.ln() + (hi.ln() - lo.ln()) * (i as f64 + 0.5) / w_steps as f64).exp();
            for j in 0..h_steps {
                let h = h_lo + (h_hi - h_lo) * (j as f64 + 0.5) / h_steps as f64;
                acc += mean_sigmoid_uniform(spec.bias + s.theta, s.mu, h, w);
            }
        }
        signal_part += acc / (w_steps * h_steps) as f64;
    }
    signal_part /= spec.signals.len() as f64;
    let r = spec.signal_rate;
    Ok((1.0 - r) * sigmoid(spec.bias) + r * signal_part)
}

/// Generates a spec and runs it through vocabulary building, truncation to
/// `max_len` and the id-hash split.
pub fn synth_dataset(spec: &SynthSpec, seed: u64, max_len: usize) -> Result<(PreparedData, GroundTruth)> {
    let SynthData { trails, mut truth } = synth_generate(spec, seed)?;
    let vocab = build_vocab(&trails, 1);
    for s in &mut truth.signals {
        let id = vocab.id(&s.key);
        s.vocab_id = (id != 0).then_some(id);
    }
    let classes = spec.num_tasks.max(2);
    let mut summary = PrepareSummary {
        sessions: trails.len(),
        ..PrepareSummary::default()
    };
    let users: Vec<_> = trails
        .iter()
        .map(|r| {
            if r.events.len() > max_len {
                summary.truncated_trails += 1;
            }
            to_user_trail(r, &vocab, max_len)
        })
        .collect();
    for t in &users {
        t.validate(max_len, classes)?;
    }
    summary.trails = users.len();
    summary.positives = users.iter().filter(|t| t.label != 0).count();
    summary.negatives = summary.trails - summary.positives;
    summary.positive_rate = summary.positives as f64 / summary.trails as f64;
    summary.vocab_size = vocab.len();
    let (train, test) = split_train_test(users, spec.test_fraction, seed)?;
    summary.train_size = train.len();
    summary.test_size = test.len();
    Ok((
        PreparedData {
            train,
            test,
            vocab,
            summary,
        },
        truth,
    ))
}

/// Click/buy logs in the RecSys 2015 file layout with a known purchase model.
///
/// Session length is `1 + Geometric(p_continue)`, click gaps are log-normal,
/// and items follow a Zipf law. Each category carries an intent weight whose
/// contribution to the purchase log-odds fades with the time between that
/// click and the end of the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSpec {
    pub sessions: usize,
    pub items: usize,
    pub brands: usize,
    pub continue_prob: f64,
    pub max_clicks: usize,
    /// Median gap between clicks, seconds.
    pub median_gap_seconds: f64,
    pub gap_sigma: f64,
    pub bias: f64,
    /// Log-odds per unit of `ln(session length)`.
    pub length_weight: f64,
    /// Hours over which a click's intent halves.
    pub intent_half_life_hours: f64,
    pub start_time: f64,
    pub span_days: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            sessions: 100_000,
            items: 5_000,
            brands: 200,
            continue_prob: 0.72,
            max_clicks: 60,
            median_gap_seconds: 60.0,
            gap_sigma: 1.3,
            bias: -4.4,
            length_weight: 0.9,
            intent_half_life_hours: 0.1,
            start_time: 1_396_310_400.0,
            span_days: 183.0,
        }
    }
}

struct Catalog {
    categories: Vec<String>,
    intent: Vec<f64>,
    item_category: Vec<usize>,
    item_price: Vec<u32>,
    popularity: WeightedIndex<f64>,
}

impl Catalog {
    fn new(spec: &SurrogateSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut categories = vec!["0".to_string(), "S".to_string()];
        categories.extend((1..=12).map(|c| c.to_string()));
        categories.extend((0..spec.brands).map(|b| format!("{}", 2_000_000_000u64 + 7_919 * b as u64)));
        let intent: Vec<f64> = (0..categories.len())
            .map(|c| match c {
                0 => 0.0,
                1 => 1.2,
                _ => 3.0 * rng.random::<f64>() - 1.5,
            })
            .collect();
        let item_category = (0..spec.items)
            .map(|_| {
                let u = rng.random::<f64>();
                if u < 0.55 {
                    0
                } else if u < 0.65 {
                    1
                } else if u < 0.9 {
                    rng.random_range(2..14)
                } else {
                    rng.random_range(14..categories.len())
                }
            })
            .collect();
        let item_price = (0..spec.items).map(|_| rng.random_range(100..20_000)).collect();
        let weights: Vec<f64> = (1..=spec.items).map(|r| 1.0 / (r as f64).powf(0.9)).collect();
        let popularity = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            categories,
            intent,
            item_category,
            item_price,
            popularity,
        })
    }
}

/// Writes `clicks.dat`-style and `buys.dat`-style files. Returns the number of
/// buying sessions.
pub fn write_recsys_surrogate(
    spec: &SurrogateSpec,
    seed: u64,
    clicks_path: impl AsRef<Path>,
    buys_path: impl AsRef<Path>,
) -> Result<usize> {
    if spec.sessions == 0 || spec.items == 0 || spec.max_clicks == 0 {
        return Err(Error::Config(
            "surrogate needs sessions, items and max_clicks > 0".into(),
        ));
    }
    if !(0.0..1.0).contains(&spec.continue_prob) || !(spec.intent_half_life_hours > 0.0) {
        return Err(Error::Config("bad continue_prob or intent half-life".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalog = Catalog::new(spec, &mut rng)?;
    let gaps = LogNormal::new(spec.median_gap_seconds.ln(), spec.gap_sigma)
        .map_err(|e| Error::Config(e.to_string()))?;
    let create = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));
    let (clicks_path, buys_path) = (clicks_path.as_ref(), buys_path.as_ref());
    let mut clicks = create(clicks_path)?;
    let mut buys = create(buys_path)?;
    let decay = std::f64::consts::LN_2 / spec.intent_half_life_hours;
    let mut buyers = 0;
    for s in 0..spec.sessions {
        let session = s + 1;
        let mut len = 1;
        while len < spec.max_clicks && rng.random::<f64>() < spec.continue_prob {
            len += 1;
        }
        let mut t = spec.start_time
            + spec.span_days * 86_400.0 * (s as f64 + rng.random::<f64>()) / spec.sessions as f64;
        let mut clicked = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                t += gaps.sample(&mut rng);
            }
            let item = catalog.popularity.sample(&mut rng);
            clicked.push((t, item));
        }
        let last = clicked.last().expect("len >= 1").0;
        let mut logit = spec.bias + spec.length_weight * (len as f64).ln();
        for &(ts, item) in &clicked {
            let dt = (last - ts) / HOUR;
            logit += catalog.intent[catalog.item_category[item]] * (-decay * dt).exp();
        }
        for &(ts, item) in &clicked {
            let ts = (ts * 1000.0).round() / 1000.0;
            let cat = &catalog.categories[catalog.item_category[item]];
            writeln!(
                clicks,
                "{session},{},{},{cat}",
                format_timestamp(ts),
                214_500_000 + item
            )
            .map_err(|e| Error::io(clicks_path, e))?;
        }
        if rng.random::<f64>() < sigmoid(logit) {
            buyers += 1;
            let n = rng.random_range(1..=clicked.len().min(3));
            let mut ts = last + gaps.sample(&mut rng);
            for &(_, item) in clicked.iter().rev().take(n) {
                let qty = rng.random_range(1..=3);
                writeln!(
                    buys,
                    "{session},{},{},{},{qty}",
                    format_timestamp((ts * 1000.0).round() / 1000.0),
                    214_500_000 + item,
                    catalog.item_price[item]
                )
                .map_err(|e| Error::io(buys_path, e))?;
                ts += 1.0;
            }
        }
    }
    clicks.flush().map_err(|e| Error::io(clicks_path, e))?;
    buys.flush().map_err(|e| Error::io(buys_path, e))?;
    Ok(buyers)
}
