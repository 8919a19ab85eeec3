//! Multiple-choice exam synthesis across five categories: pattern
//! recognition, noise understanding, anomaly detection, similarity
//! analysis, and causality analysis.
//!
//! Every item stores the generating truth, so an oracle that reads it can
//! always identify the correct option; that closed loop is what keeps the
//! answer keys well-posed after option shuffling.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;
use crate::synth::{self, AnomalySpec, SeasonalSpec, SeriesSpec, TrendDirection, TrendSpec};
use crate::tokenizer::{TS_CLOSE, TS_OPEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExamCategory {
    #[serde(rename = "PR")]
    PatternRecognition,
    #[serde(rename = "NU")]
    NoiseUnderstanding,
    #[serde(rename = "AD")]
    AnomalyDetection,
    #[serde(rename = "SA")]
    SimilarityAnalysis,
    #[serde(rename = "CA")]
    CausalityAnalysis,
}

impl ExamCategory {
    pub const ALL: [ExamCategory; 5] = [
        ExamCategory::PatternRecognition,
        ExamCategory::NoiseUnderstanding,
        ExamCategory::AnomalyDetection,
        ExamCategory::SimilarityAnalysis,
        ExamCategory::CausalityAnalysis,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            ExamCategory::PatternRecognition => "PR",
            ExamCategory::NoiseUnderstanding => "NU",
            ExamCategory::AnomalyDetection => "AD",
            ExamCategory::SimilarityAnalysis => "SA",
            ExamCategory::CausalityAnalysis => "CA",
        }
    }

    pub fn parse(code: &str) -> Result<Self> {
        match code.to_ascii_uppercase().as_str() {
            "PR" => Ok(ExamCategory::PatternRecognition),
            "NU" => Ok(ExamCategory::NoiseUnderstanding),
            "AD" => Ok(ExamCategory::AnomalyDetection),
            "SA" => Ok(ExamCategory::SimilarityAnalysis),
            "CA" => Ok(ExamCategory::CausalityAnalysis),
            other => Err(Error::config(format!(
                "unknown exam category `{other}`; expected PR, NU, AD, SA, or CA"
            ))),
        }
    }
}

pub const OPTION_LABELS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExamOption {
    pub label: char,
    pub text: String,
}

/// The generating truth, stored per item for oracle checks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth {
    Pattern { class: usize },
    Noise { class: usize },
    AnomalyQuarter { quarter: usize, position: usize },
    Similarity { class: usize, shape: usize },
    Causality { class: usize, lag: usize },
}

impl GroundTruth {
    fn class_index(&self) -> usize {
        match self {
            GroundTruth::Pattern { class } => *class,
            GroundTruth::Noise { class } => *class,
            GroundTruth::AnomalyQuarter { quarter, .. } => *quarter,
            GroundTruth::Similarity { class, .. } => *class,
            GroundTruth::Causality { class, .. } => *class,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExamItem {
    pub item_id: String,
    pub category: ExamCategory,
    /// Question text containing one placeholder pair per series.
    pub question: String,
    pub series: Vec<TimeSeries>,
    pub options: Vec<ExamOption>,
    pub answer_key: char,
    pub truth: GroundTruth,
}

impl ExamItem {
    /// Prompt text fed to the model: question plus the labeled options.
    pub fn prompt(&self) -> String {
        let mut out = self.question.clone();
        for opt in &self.options {
            out.push('\n');
            out.push_str(&format!("{}. {}", opt.label, opt.text));
        }
        out
    }
}

/// Answer an item from its stored truth (never from the model).
pub fn oracle_answer(item: &ExamItem) -> Result<char> {
    let class_texts = option_texts(item.category);
    let want = class_texts[item.truth.class_index()];
    let hits: Vec<char> = item
        .options
        .iter()
        .filter(|o| o.text == want)
        .map(|o| o.label)
        .collect();
    match hits.as_slice() {
        [label] => Ok(*label),
        _ => Err(Error::config(format!(
            "item `{}` does not have exactly one option matching its truth",
            item.item_id
        ))),
    }
}

fn option_texts(category: ExamCategory) -> [&'static str; 4] {
    match category {
        ExamCategory::PatternRecognition => [
            "an upward trend",
            "a downward trend",
            "a repeating cycle",
            "no clear pattern",
        ],
        ExamCategory::NoiseUnderstanding => [
            "white noise",
            "a random walk",
            "a clean periodic signal",
            "a straight ramp",
        ],
        ExamCategory::AnomalyDetection => [
            "the first quarter",
            "the second quarter",
            "the third quarter",
            "the fourth quarter",
        ],
        ExamCategory::SimilarityAnalysis => [
            "only the first",
            "only the second",
            "both of them",
            "neither of them",
        ],
        ExamCategory::CausalityAnalysis => [
            "the second lags the first",
            "the first lags the second",
            "they are independent",
            "they are identical",
        ],
    }
}

/// Shape descriptions a similarity question can ask about.
const SA_SHAPES: [&str; 3] = ["a steady upward trend", "a steady downward trend", "a repeating cycle"];

const SERIES_LEN: usize = 96;

fn shuffled_options(category: ExamCategory, truth_class: usize, rng: &mut ChaCha8Rng) -> (Vec<ExamOption>, char) {
    let texts = option_texts(category);
    let mut order: Vec<usize> = (0..4).collect();
    order.shuffle(rng);
    let mut options = Vec::with_capacity(4);
    let mut key = 'A';
    for (slot, &class) in order.iter().enumerate() {
        let label = OPTION_LABELS[slot];
        if class == truth_class {
            key = label;
        }
        options.push(ExamOption {
            label,
            text: texts[class].to_string(),
        });
    }
    (options, key)
}

fn gaussian_series(id: &str, len: usize, std: f64, rng: &mut ChaCha8Rng) -> TimeSeries {
    let normal = Normal::new(0.0, std).expect("valid stddev");
    TimeSeries::new(id, (0..len).map(|_| normal.sample(rng)).collect())
}

fn random_walk(id: &str, len: usize, rng: &mut ChaCha8Rng) -> TimeSeries {
    let normal = Normal::new(0.0, 1.0).expect("valid stddev");
    let mut total = 0.0;
    let values = (0..len)
        .map(|_| {
            total += normal.sample(rng);
            total
        })
        .collect();
    TimeSeries::new(id, values)
}

/// One directional/periodic/flat series for PR and SA questions.
fn pattern_series(id: &str, class: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<TimeSeries> {
    let amplitude = rng.gen_range(1.5..3.0);
    let spec = match class {
        0 | 1 => SeriesSpec {
            length: SERIES_LEN,
            trend: TrendSpec {
                direction: if class == 0 { TrendDirection::Up } else { TrendDirection::Down },
                slope: rng.gen_range(0.08..0.16),
            },
            seasonal: None,
            noise_std: rng.gen_range(0.2..0.5),
            anomalies: Vec::new(),
            base_level: rng.gen_range(-2.0..2.0),
            rng_seed: seed,
        },
        2 => SeriesSpec {
            length: SERIES_LEN,
            trend: TrendSpec {
                direction: TrendDirection::Flat,
                slope: 0.0,
            },
            seasonal: Some(SeasonalSpec {
                period: rng.gen_range(8..=16),
                amplitude,
            }),
            noise_std: rng.gen_range(0.0..0.15) * amplitude,
            anomalies: Vec::new(),
            base_level: rng.gen_range(-2.0..2.0),
            rng_seed: seed,
        },
        _ => SeriesSpec {
            length: SERIES_LEN,
            trend: TrendSpec {
                direction: TrendDirection::Flat,
                slope: 0.0,
            },
            seasonal: None,
            noise_std: rng.gen_range(0.3..0.6),
            anomalies: Vec::new(),
            base_level: rng.gen_range(-2.0..2.0),
            rng_seed: seed,
        },
    };
    let (mut series, _) = synth::generate_series(&spec)?;
    series.series_id = id.to_string();
    Ok(series)
}

fn build_pattern_item(index: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<ExamItem> {
    let class = rng.gen_range(0..4);
    let series = pattern_series(&format!("PR-{seed}-{index}"), class, seed.wrapping_add(index as u64 * 31 + 1), rng)?;
    let (options, answer_key) = shuffled_options(ExamCategory::PatternRecognition, class, rng);
    Ok(ExamItem {
        item_id: format!("PR-{seed}-{index:04}"),
        category: ExamCategory::PatternRecognition,
        question: format!("What pattern does this series show? {TS_OPEN}{TS_CLOSE}"),
        series: vec![series],
        options,
        answer_key,
        truth: GroundTruth::Pattern { class },
    })
}

fn build_noise_item(index: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<ExamItem> {
    let class = rng.gen_range(0..4);
    let id = format!("NU-{seed}-{index}");
    let series = match class {
        0 => gaussian_series(&id, SERIES_LEN, 1.0, rng),
        1 => random_walk(&id, SERIES_LEN, rng),
        2 => {
            let spec = SeriesSpec {
                length: SERIES_LEN,
                trend: TrendSpec {
                    direction: TrendDirection::Flat,
                    slope: 0.0,
                },
                seasonal: Some(SeasonalSpec {
                    period: rng.gen_range(8..=16),
                    amplitude: rng.gen_range(1.5..3.0),
                }),
                noise_std: 0.0,
                anomalies: Vec::new(),
                base_level: 0.0,
                rng_seed: seed.wrapping_add(index as u64 * 17 + 3),
            };
            let (mut s, _) = synth::generate_series(&spec)?;
            s.series_id = id.clone();
            s
        }
        _ => {
            let slope = rng.gen_range(0.05..0.15) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            TimeSeries::new(&id, (0..SERIES_LEN).map(|t| slope * t as f64).collect())
        }
    };
    let (options, answer_key) = shuffled_options(ExamCategory::NoiseUnderstanding, class, rng);
    Ok(ExamItem {
        item_id: format!("NU-{seed}-{index:04}"),
        category: ExamCategory::NoiseUnderstanding,
        question: format!("What kind of signal is this series? {TS_OPEN}{TS_CLOSE}"),
        series: vec![series],
        options,
        answer_key,
        truth: GroundTruth::Noise { class },
    })
}

fn build_anomaly_item(index: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<ExamItem> {
    let len = SERIES_LEN;
    let quarter = rng.gen_range(0..4);
    let position = rng.gen_range(quarter * len / 4..(quarter + 1) * len / 4);
    let noise = rng.gen_range(0.3..0.6);
    let spec = SeriesSpec {
        length: len,
        trend: TrendSpec {
            direction: TrendDirection::Flat,
            slope: 0.0,
        },
        seasonal: None,
        noise_std: noise,
        anomalies: vec![AnomalySpec {
            position,
            magnitude: 8.0 * noise * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        }],
        base_level: rng.gen_range(-2.0..2.0),
        rng_seed: seed.wrapping_add(index as u64 * 13 + 5),
    };
    let (mut series, _) = synth::generate_series(&spec)?;
    series.series_id = format!("AD-{seed}-{index}");
    let (options, answer_key) = shuffled_options(ExamCategory::AnomalyDetection, quarter, rng);
    Ok(ExamItem {
        item_id: format!("AD-{seed}-{index:04}"),
        category: ExamCategory::AnomalyDetection,
        question: format!("Where is the spike in this series? {TS_OPEN}{TS_CLOSE}"),
        series: vec![series],
        options,
        answer_key,
        truth: GroundTruth::AnomalyQuarter { quarter, position },
    })
}

fn build_similarity_item(index: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<ExamItem> {
    let shape = rng.gen_range(0..SA_SHAPES.len());
    // shape index maps onto pattern classes: up=0, down=1, cycle=2
    let class = rng.gen_range(0..4); // first / second / both / neither
    let contrast = |rng: &mut ChaCha8Rng| -> usize {
        // a pattern class that is clearly not the described shape
        let mut c = rng.gen_range(0..4);
        while c == shape {
            c = rng.gen_range(0..4);
        }
        c
    };
    let (class_a, class_b) = match class {
        0 => (shape, contrast(rng)),
        1 => (contrast(rng), shape),
        2 => (shape, shape),
        _ => (contrast(rng), contrast(rng)),
    };
    let sa = pattern_series(
        &format!("SA-{seed}-{index}-a"),
        class_a,
        seed.wrapping_add(index as u64 * 29 + 7),
        rng,
    )?;
    let sb = pattern_series(
        &format!("SA-{seed}-{index}-b"),
        class_b,
        seed.wrapping_add(index as u64 * 29 + 8),
        rng,
    )?;
    let (options, answer_key) = shuffled_options(ExamCategory::SimilarityAnalysis, class, rng);
    Ok(ExamItem {
        item_id: format!("SA-{seed}-{index:04}"),
        category: ExamCategory::SimilarityAnalysis,
        question: format!(
            "Which series shows {}? first: {TS_OPEN}{TS_CLOSE} second: {TS_OPEN}{TS_CLOSE}",
            SA_SHAPES[shape]
        ),
        series: vec![sa, sb],
        options,
        answer_key,
        truth: GroundTruth::Similarity { class, shape },
    })
}

/// Base signal with enough autocorrelation for lag detection to be
/// meaningful.
fn causal_base(id: &str, seed: u64, rng: &mut ChaCha8Rng) -> Result<TimeSeries> {
    let spec = SeriesSpec {
        length: SERIES_LEN,
        trend: TrendSpec {
            direction: TrendDirection::Flat,
            slope: 0.0,
        },
        seasonal: Some(SeasonalSpec {
            period: rng.gen_range(10..=20),
            amplitude: rng.gen_range(1.5..3.0),
        }),
        noise_std: rng.gen_range(0.2..0.4),
        anomalies: Vec::new(),
        base_level: 0.0,
        rng_seed: seed,
    };
    let (mut s, _) = synth::generate_series(&spec)?;
    s.series_id = id.to_string();
    Ok(s)
}

fn lagged_copy(base: &TimeSeries, id: &str, lag: usize, eps_std: f64, rng: &mut ChaCha8Rng) -> TimeSeries {
    let normal = Normal::new(0.0, eps_std).expect("valid stddev");
    let n = base.values.len();
    let values = (0..n)
        .map(|t| {
            let src = if t >= lag { base.values[t - lag] } else { base.values[0] };
            src + normal.sample(rng)
        })
        .collect();
    TimeSeries::new(id, values)
}

fn build_causality_item(index: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<ExamItem> {
    let class = rng.gen_range(0..4);
    let lag = rng.gen_range(3..=6);
    let ida = format!("CA-{seed}-{index}-a");
    let idb = format!("CA-{seed}-{index}-b");
    let base_seed = seed.wrapping_add(index as u64 * 41 + 11);
    let (sa, sb) = match class {
        0 => {
            let a = causal_base(&ida, base_seed, rng)?;
            let b = lagged_copy(&a, &idb, lag, 0.15, rng);
            (a, b)
        }
        1 => {
            let b = causal_base(&idb, base_seed, rng)?;
            let a = lagged_copy(&b, &ida, lag, 0.15, rng);
            (a, b)
        }
        2 => {
            let a = causal_base(&ida, base_seed, rng)?;
            let b = causal_base(&idb, base_seed.wrapping_add(7331), rng)?;
            (a, b)
        }
        _ => {
            let a = causal_base(&ida, base_seed, rng)?;
            let mut b = a.clone();
            b.series_id = idb.clone();
            (a, b)
        }
    };
    let (options, answer_key) = shuffled_options(ExamCategory::CausalityAnalysis, class, rng);
    Ok(ExamItem {
        item_id: format!("CA-{seed}-{index:04}"),
        category: ExamCategory::CausalityAnalysis,
        question: format!(
            "How are these series related? first: {TS_OPEN}{TS_CLOSE} second: {TS_OPEN}{TS_CLOSE}"
        ),
        series: vec![sa, sb],
        options,
        answer_key,
        truth: GroundTruth::Causality { class, lag },
    })
}

/// Generate `n_items` items of one category, deterministically per seed.
pub fn generate_exam(category: ExamCategory, n_items: usize, rng_seed: u64) -> Result<Vec<ExamItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ (category.code().len() as u64) << 32);
    let mut items = Vec::with_capacity(n_items);
    for index in 0..n_items {
        let item = match category {
            ExamCategory::PatternRecognition => build_pattern_item(index, rng_seed, &mut rng)?,
            ExamCategory::NoiseUnderstanding => build_noise_item(index, rng_seed, &mut rng)?,
            ExamCategory::AnomalyDetection => build_anomaly_item(index, rng_seed, &mut rng)?,
            ExamCategory::SimilarityAnalysis => build_similarity_item(index, rng_seed, &mut rng)?,
            ExamCategory::CausalityAnalysis => build_causality_item(index, rng_seed, &mut rng)?,
        };
        items.push(item);
    }
    Ok(items)
}

/// A balanced exam spanning all five categories.
pub fn generate_mixed_exam(items_per_category: usize, rng_seed: u64) -> Result<Vec<ExamItem>> {
    let mut items = Vec::with_capacity(items_per_category * 5);
    for category in ExamCategory::ALL {
        items.extend(generate_exam(category, items_per_category, rng_seed)?);
    }
    Ok(items)
}

pub fn write_exam_file(path: impl AsRef<Path>, items: &[ExamItem]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_exam_file(path: impl AsRef<Path>) -> Result<Vec<ExamItem>> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ExamItem = serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!(
                "{}:{}: bad exam item: {e}",
                path.as_ref().display(),
                lineno + 1
            ))
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Pearson correlation of `a[t]` against `b[t + lag]` (for `lag >= 0`),
/// i.e. how strongly `b` follows `a` after `lag` steps.
pub fn lagged_correlation(a: &[f64], b: &[f64], lag: isize) -> f64 {
    let n = a.len().min(b.len());
    let (xs, ys): (&[f64], &[f64]) = if lag >= 0 {
        let l = lag as usize;
        if l >= n {
            return 0.0;
        }
        (&a[..n - l], &b[l..n])
    } else {
        let l = (-lag) as usize;
        if l >= n {
            return 0.0;
        }
        (&a[l..n], &b[..n - l])
    };
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// Peak lagged correlation over `[-max_lag, max_lag]`.
pub fn peak_lagged_correlation(a: &[f64], b: &[f64], max_lag: usize) -> (isize, f64) {
    let mut best = (0isize, f64::NEG_INFINITY);
    for lag in -(max_lag as isize)..=(max_lag as isize) {
        let c = lagged_correlation(a, b, lag);
        if c > best.1 {
            best = (lag, c);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exam_is_deterministic_per_seed() {
        let a = generate_exam(ExamCategory::PatternRecognition, 5, 7).unwrap();
        let b = generate_exam(ExamCategory::PatternRecognition, 5, 7).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
        let c = generate_exam(ExamCategory::PatternRecognition, 5, 8).unwrap();
        assert_ne!(ja, serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn every_item_has_exactly_one_correct_option() {
        for category in ExamCategory::ALL {
            let items = generate_exam(category, 30, 11).unwrap();
            for item in &items {
                assert_eq!(item.options.len(), 4);
                let key = oracle_answer(item).unwrap();
                assert_eq!(key, item.answer_key, "item {}", item.item_id);
                let labels: Vec<char> = item.options.iter().map(|o| o.label).collect();
                assert_eq!(labels, vec!['A', 'B', 'C', 'D']);
            }
        }
    }

    #[test]
    fn series_count_matches_placeholders() {
        for category in ExamCategory::ALL {
            let items = generate_exam(category, 8, 3).unwrap();
            for item in &items {
                let k = crate::fusion::count_placeholder_pairs(&item.question).unwrap();
                assert_eq!(k, item.series.len(), "item {}", item.item_id);
            }
        }
    }

    #[test]
    fn causality_lagged_pair_beats_independent_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = causal_base("a", 1234, &mut rng).unwrap();
        let b = lagged_copy(&a, "b", 3, 0.1, &mut rng);
        let c = causal_base("c", 987_654, &mut rng).unwrap();
        let (lag_ab, peak_ab) = peak_lagged_correlation(&a.values, &b.values, 8);
        let (_, peak_ac) = peak_lagged_correlation(&a.values, &c.values, 8);
        assert_eq!(lag_ab, 3, "detected lag");
        assert!(
            peak_ab > peak_ac,
            "lagged pair peak {peak_ab} should exceed independent {peak_ac}"
        );
        assert!(peak_ab > 0.9);
    }

    #[test]
    fn anomaly_quarter_bucketing() {
        // a spike at 40% of the way through lands in the second quarter
        let items = generate_exam(ExamCategory::AnomalyDetection, 40, 21).unwrap();
        for item in &items {
            if let GroundTruth::AnomalyQuarter { quarter, position } = &item.truth {
                let len = item.series[0].values.len();
                assert_eq!(*quarter, position * 4 / len);
            } else {
                panic!("wrong truth kind");
            }
        }
    }

    #[test]
    fn exam_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exam.jsonl");
        let items = generate_exam(ExamCategory::SimilarityAnalysis, 4, 5).unwrap();
        write_exam_file(&path, &items).unwrap();
        let back = read_exam_file(&path).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&items).unwrap());
    }

    #[test]
    fn prompt_contains_options_block() {
        let items = generate_exam(ExamCategory::NoiseUnderstanding, 1, 2).unwrap();
        let prompt = items[0].prompt();
        assert!(prompt.contains("A. "));
        assert!(prompt.contains("D. "));
        assert!(prompt.contains(TS_OPEN));
    }
}
