//! Attribute-aware caption synthesis: the paraphrased instruction bank,
//! instruction augmentation, two offline captioners, the external-model
//! path, and dataset assembly from pure and contextual sources.
//!
//! The template captioner fills one fixed sentence frame per attribute and
//! is deliberately monotonous; it doubles as the low-diversity baseline.
//! The attribute-aware captioner is the offline stand-in for a strong
//! captioning model: grounded in the same attributes but drawing from wide
//! phrase pools, so its corpus is lexically diverse.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::external::{CaptionJob, ExternalCaptioner, ExternalConfig};
use crate::plot;
use crate::series::{write_series_file, TimeSeries};
use crate::synth::{
    self, AttributeSet, NoiseLevel, SeasonalSpec, SeriesSpec, TrendDirection, TrendSpec,
    DOMAIN_TAGS,
};

/// The shipped paraphrase bank: twenty instructions that all ask for the
/// same five attribute families in different words.
pub const INSTRUCTION_BANK: [&str; 20] = [
    "Write a paragraph that analyzes the time series, covering its local behaviors, noise levels, periodic structures, overall trend, frequency content, and any other characteristics you consider important.",
    "Create a detailed description of the time series in one paragraph, including its trend, frequency properties, periodicity, noise, local variations, and other relevant characteristics.",
    "Provide a paragraph summarizing the time series characteristics such as noise, periodic patterns, long-term trends, frequency behavior, local anomalies, and any other significant features.",
    "Compose a detailed caption describing the frequency characteristics, noise, trends, local variations, periodic structures, and any other meaningful patterns you observe in the time series.",
    "Craft a one-paragraph summary of the time series, noting local fluctuations, periodic behavior, frequency features, trend, noise content, and any other insights you find important.",
    "Generate a descriptive paragraph detailing the time series' key attributes, including frequency structure, noise patterns, trend direction, local features, periodic elements, and other notable aspects.",
    "Give a thorough one-paragraph explanation of the time series, addressing periodicity, noise, frequency components, trend, local variations, and other relevant characteristics.",
    "Write a narrative paragraph explaining the time series, focusing on noise, frequency characteristics, periodicity, localized structures, the overall trend, and other important features you identify.",
    "Summarize the time series in a paragraph, describing its fluctuations, recurring patterns, noise levels, frequency-domain features, trend direction, and any additional traits you find significant.",
    "Develop a paragraph that captures the key features of the time series, such as frequency traits, trend, noise, periodic components, local behaviors, and other characteristics worth noting.",
    "Provide a one-paragraph caption analyzing the time series data in terms of noise, trend, periodicity, local features, frequency-related behavior, and any additional characteristics of interest.",
    "Create a rich paragraph description of the time series, including its trend, local anomalies, periodic activity, noise artifacts, spectral content, and other important descriptive elements.",
    "Write a descriptive paragraph for the time series, highlighting frequency properties, trend behavior, periodic patterns, local structures, noise, and other characteristics you consider relevant.",
    "Generate a compact yet thorough paragraph explaining the time series in terms of periodicity, trend movement, noise level, frequency details, local dynamics, and any other key aspects.",
    "Construct a one-paragraph analysis of the time series by examining its local variations, noise, trend, periodic elements, frequency spectrum, and other notable features you deem important.",
    "Write a summary paragraph that discusses the time series' periodic features, trend behavior, local patterns, noise levels, frequency domain signals, and other characteristics worth mentioning.",
    "Create a detailed one-paragraph commentary on the time series that outlines its noise characteristics, periodicity, frequency content, trends, localized behaviors, and other useful insights.",
    "Prepare a paragraph-long description of the time series covering its trend, noise, frequency-related traits, local fluctuations, periodic structures, and any additional attributes of note.",
    "Offer a one-paragraph interpretation of the time series, highlighting its frequency features, periodic nature, local patterns, noise, trend line, and any other important characteristics you observe.",
    "Compose a detailed summary in one paragraph focusing on the time series' periodic behavior, frequency spectrum, localized fluctuations, overall trend, noise, and other relevant descriptive elements.",
];

pub const DEFAULT_BASE_INSTRUCTION: &str = "Write a caption describing this time series.";

/// The five attribute families an augmented instruction must mention.
pub const ATTRIBUTE_NAMES: [&str; 5] =
    ["trend", "frequency", "periodicity", "noise", "local variations"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptBank {
    pub base_instruction: String,
    pub instructions: Vec<String>,
}

impl Default for PromptBank {
    fn default() -> Self {
        PromptBank {
            base_instruction: DEFAULT_BASE_INSTRUCTION.to_string(),
            instructions: INSTRUCTION_BANK.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PromptBank {
    pub fn validate(&self) -> Result<()> {
        if self.instructions.is_empty() {
            return Err(Error::config("prompt bank must hold at least one instruction"));
        }
        let mut seen = std::collections::HashSet::new();
        for ins in &self.instructions {
            if !seen.insert(ins) {
                return Err(Error::config("prompt bank instructions must be pairwise distinct"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Uniform draw; deterministic under a seeded rng.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(usize, &str)> {
        if self.instructions.is_empty() {
            return Err(Error::config("cannot sample from an empty prompt bank"));
        }
        let idx = rng.gen_range(0..self.instructions.len());
        Ok((idx, self.instructions[idx].as_str()))
    }
}

/// Augment a base instruction with the five attribute families.
pub fn build_instruction(base: &str, _attrs: &AttributeSet) -> String {
    format!(
        "{base} Cover these attributes: {}.",
        ATTRIBUTE_NAMES.join(", ")
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSource {
    Pure,
    Contextual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionerKind {
    External,
    Template,
    Aware,
}

impl CaptionerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "external" => Ok(CaptionerKind::External),
            "template" => Ok(CaptionerKind::Template),
            "aware" => Ok(CaptionerKind::Aware),
            other => Err(Error::config(format!(
                "unknown captioner `{other}`; expected template, aware, or external"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CaptionerKind::External => "external",
            CaptionerKind::Template => "template",
            CaptionerKind::Aware => "aware",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaptionRecord {
    pub series_id: String,
    pub instruction_id: usize,
    pub caption: String,
    pub source: CaptionSource,
    pub captioner: CaptionerKind,
}

impl CaptionRecord {
    pub fn validate(&self, bank: &PromptBank) -> Result<()> {
        if self.caption.is_empty() {
            return Err(Error::config(format!(
                "caption for series `{}` is empty",
                self.series_id
            )));
        }
        if self.instruction_id >= bank.len() {
            return Err(Error::config(format!(
                "instruction id {} outside bank of {}",
                self.instruction_id,
                bank.len()
            )));
        }
        Ok(())
    }
}

fn frequency_phrase(series_len: usize, period: Option<usize>) -> String {
    match period {
        Some(p) => format!("{:.1} cycles per window", series_len as f64 / p as f64),
        None => "none".to_string(),
    }
}

/// One fixed sentence frame per attribute; minimal variation by design.
pub fn caption_template(
    series: &TimeSeries,
    attrs: &AttributeSet,
    rng: &mut ChaCha8Rng,
) -> CaptionRecord {
    let trend = format!("The series shows a {} trend.", attrs.trend_direction.label());
    let period = match attrs.period {
        Some(p) => format!("A cycle repeats every {p} steps."),
        None => "No cycle is present.".to_string(),
    };
    let freq = format!(
        "Frequency is {}.",
        frequency_phrase(series.values.len(), attrs.period)
    );
    let noise = format!("Noise level is {}.", attrs.noise_level.label());
    let local = format!("Local variation is {}.", attrs.local_variation_summary);
    let caption = format!("{trend} {period} {freq} {noise} {local}");
    let instruction_id = rng.gen_range(0..INSTRUCTION_BANK.len());
    CaptionRecord {
        series_id: series.series_id.clone(),
        instruction_id,
        caption,
        source: if series.context.is_some() {
            CaptionSource::Contextual
        } else {
            CaptionSource::Pure
        },
        captioner: CaptionerKind::Template,
    }
}

fn pick<'a>(pool: &[&'a str], rng: &mut ChaCha8Rng) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

const NOUNS: [&str; 8] = [
    "series", "record", "sequence", "signal", "trace", "curve", "path", "profile",
];

/// Varied decimal formatting multiplies distinct numeric tokens across the
/// corpus, which is what keeps n-gram overlap between captions low.
fn fmt_num(v: f64, rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..3) {
        0 => format!("{v:.1}"),
        1 => format!("{v:.2}"),
        _ => format!("{v:.3}"),
    }
}

fn trend_clause(series_len: usize, attrs: &AttributeSet, rng: &mut ChaCha8Rng) -> String {
    let noun = pick(&NOUNS, rng);
    let slope = attrs.trend_slope.abs();
    let gain = slope * series_len as f64;
    match attrs.trend_direction {
        TrendDirection::Up => {
            let verb = pick(
                &[
                    "climbs", "rises", "ascends", "advances", "drifts higher", "moves upward",
                    "gains ground", "presses higher", "works its way up", "steps higher",
                ],
                rng,
            );
            let tail = match rng.gen_range(0..5) {
                0 => format!("at about {} units per step", fmt_num(slope, rng)),
                1 => format!("adding roughly {} each step", fmt_num(slope, rng)),
                2 => format!("for a net gain near {}", fmt_num(gain, rng)),
                3 => format!("lifting the level {} units overall", fmt_num(gain, rng)),
                _ => "with conviction".to_string(),
            };
            format!("the {noun} {verb} {tail}")
        }
        TrendDirection::Down => {
            let verb = pick(
                &[
                    "declines", "slides", "descends", "retreats", "drifts lower", "erodes",
                    "loses ground", "sinks", "steps lower", "falls away",
                ],
                rng,
            );
            let tail = match rng.gen_range(0..5) {
                0 => format!("at about {} units per step", fmt_num(slope, rng)),
                1 => format!("shedding near {} each step", fmt_num(slope, rng)),
                2 => format!("for a net loss near {}", fmt_num(gain, rng)),
                3 => format!("dropping {} units across the span", fmt_num(gain, rng)),
                _ => "without much pause".to_string(),
            };
            format!("the {noun} {verb} {tail}")
        }
        TrendDirection::Flat => {
            let verb = pick(
                &[
                    "holds flat", "stays level", "keeps to its band", "treads water",
                    "hovers near its mean", "sits steady", "barely moves", "remains anchored",
                ],
                rng,
            );
            let tail = pick(
                &[
                    "across the window",
                    "from end to end",
                    "throughout the record",
                    "over the full span",
                    "with no lasting drift",
                ],
                rng,
            );
            format!("the {noun} {verb} {tail}")
        }
    }
}

fn period_clause(series_len: usize, attrs: &AttributeSet, rng: &mut ChaCha8Rng) -> String {
    let noun = pick(&NOUNS, rng);
    match attrs.period {
        Some(p) => {
            let cycles = series_len as f64 / p as f64;
            match rng.gen_range(0..7) {
                0 => format!("a cycle returns every {p} steps or so"),
                1 => format!("peaks arrive about {p} samples apart"),
                2 => format!("the rhythm repeats near {p} observations"),
                3 => format!("one full swing spans roughly {p} points"),
                4 => format!("about {cycles:.1} complete cycles fill the window"),
                5 => format!("the dominant beat of the {noun} sits at {p} steps"),
                _ => format!("spectral energy bunches at one beat per {p} steps"),
            }
        }
        None => {
            let lead = pick(&["no cycle", "no periodic rhythm", "no repeating beat", "no seasonal pulse"], rng);
            let tail = pick(
                &[
                    "stands out",
                    "emerges from the autocorrelation",
                    "organizes the movement",
                    "is anywhere to be found",
                    "shapes the spectrum, which stays broadband",
                ],
                rng,
            );
            format!("{lead} {tail} in the {noun}")
        }
    }
}

fn noise_clause(attrs: &AttributeSet, rng: &mut ChaCha8Rng) -> String {
    let noun = pick(&NOUNS, rng);
    let (adjs, verbs): (&[&str], &[&str]) = match attrs.noise_level {
        NoiseLevel::Low => (
            &["faint", "minimal", "barely-there", "negligible", "whisper-quiet"],
            &["rides on", "clings to", "dusts", "accompanies", "touches"],
        ),
        NoiseLevel::Medium => (
            &["moderate", "middling", "noticeable", "routine", "persistent"],
            &["speckles", "rides on", "wobbles through", "textures", "accompanies"],
        ),
        NoiseLevel::High => (
            &["heavy", "thick", "aggressive", "relentless", "dominant"],
            &["buffets", "blankets", "rattles", "overwhelms", "roughens"],
        ),
    };
    format!(
        "{} {} jitter {} the {noun}",
        pick(&["a band of", "a layer of", "an undercoat of", "a veil of", "some"], rng),
        pick(adjs, rng),
        pick(verbs, rng)
    )
}

fn anomaly_clause(attrs: &AttributeSet, rng: &mut ChaCha8Rng) -> String {
    let noun = pick(&NOUNS, rng);
    match attrs.anomaly_positions.as_slice() {
        [] => {
            let subj = pick(&["no outlier", "no sudden shock", "no stray excursion", "no abrupt jolt"], rng);
            let verb = pick(&["interrupts", "disturbs", "breaks", "punctuates", "mars"], rng);
            format!("{subj} {verb} the {noun}")
        }
        [pos] => {
            let what = pick(&["an abrupt spike", "a lone outlier", "an isolated jolt", "a sharp excursion"], rng);
            let verb = pick(&["erupts", "lands", "appears", "juts out", "fires"], rng);
            let near = pick(&["near step", "around position", "close to index", "by sample"], rng);
            format!("{what} {verb} {near} {pos}")
        }
        many => {
            let n = many.len();
            let first = many[0];
            match rng.gen_range(0..3) {
                0 => format!("{n} separate spikes punctuate the {noun}, the first near step {first}"),
                1 => format!("several outliers, {n} in all, jut out of the band"),
                _ => format!("{n} abrupt excursions disturb the flow from index {first} onward"),
            }
        }
    }
}

fn local_clause(attrs: &AttributeSet, rng: &mut ChaCha8Rng) -> String {
    let opener = pick(
        &["locally", "at short range", "step to step", "in fine detail", "between neighbors", "up close"],
        rng,
    );
    let body: &[&str] = match attrs.noise_level {
        NoiseLevel::Low => &[
            "the motion stays gentle and orderly",
            "adjacent readings differ only slightly",
            "consecutive points track each other closely",
            "changes remain small and predictable",
        ],
        NoiseLevel::Medium => &[
            "short stretches wander before reverting",
            "segments alternate between calm and restless",
            "nearby points agree loosely with occasional kinks",
            "movement shows mild character changes",
        ],
        NoiseLevel::High => &[
            "the path lurches and reverses often",
            "short windows look chaotic despite the larger structure",
            "neighboring readings disagree sharply",
            "behavior turns jumpy and hard to anticipate",
        ],
    };
    format!("{opener}, {}", pick(body, rng))
}

/// Per-series measurements; their digits rarely repeat across a corpus.
fn stats_clause(series: &TimeSeries, rng: &mut ChaCha8Rng) -> String {
    let vmin = series.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = series.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = series.values.iter().sum::<f64>() / series.values.len() as f64;
    let first = series.values[0];
    let last = *series.values.last().expect("non-empty");
    match rng.gen_range(0..5) {
        0 => format!("values run from {} up to {}", fmt_num(vmin, rng), fmt_num(vmax, rng)),
        1 => format!("the mean sits near {}", fmt_num(mean, rng)),
        2 => format!(
            "readings open at {} and close at {}",
            fmt_num(first, rng),
            fmt_num(last, rng)
        ),
        3 => format!("the range spans about {} units", fmt_num(vmax - vmin, rng)),
        _ => format!(
            "extremes touch {} and {} around a mean of {}",
            fmt_num(vmin, rng),
            fmt_num(vmax, rng),
            fmt_num(mean, rng)
        ),
    }
}

const INTROS: [&str; 10] = [
    "Viewed end to end,",
    "Taken as a whole,",
    "Across the observed window,",
    "Reading the plot start to finish,",
    "Over the recorded span,",
    "Through the captured interval,",
    "Judging from the full sweep,",
    "Considered against its baseline,",
    "Scanning left to right,",
    "Looking at the complete record,",
];

const CONNECTIVES: [&str; 6] = ["; ", ". Also, ", ", while ", ". Meanwhile, ", "; in addition, ", ". Beyond that, "];

const CLOSERS: [&str; 6] = [
    "Together these traits define the series.",
    "That mix characterizes the whole record.",
    "Overall the pieces form a coherent picture.",
    "Such is the fingerprint of this sequence.",
    "Those properties summarize the data well.",
    "All of this shapes how the series reads.",
];

/// Diverse attribute-grounded caption; the offline stand-in for a strong
/// captioning model. With `with_attributes` off it degrades to a vague
/// chronological narration, the "- Attributes" ablation.
pub fn caption_aware(
    series: &TimeSeries,
    attrs: &AttributeSet,
    instruction_id: usize,
    with_attributes: bool,
    rng: &mut ChaCha8Rng,
) -> CaptionRecord {
    let caption = if with_attributes {
        let mut clauses = vec![
            trend_clause(series.values.len(), attrs, rng),
            period_clause(series.values.len(), attrs, rng),
            noise_clause(attrs, rng),
            anomaly_clause(attrs, rng),
            local_clause(attrs, rng),
            stats_clause(series, rng),
        ];
        clauses.shuffle(rng);
        let mut text = if rng.gen_bool(0.7) {
            format!("{} {}", pick(&INTROS, rng), clauses[0])
        } else {
            let mut first = clauses[0].clone();
            if let Some(c) = first.get_mut(0..1) {
                c.make_ascii_uppercase();
            }
            first
        };
        for clause in &clauses[1..] {
            text.push_str(pick(&CONNECTIVES, rng));
            text.push_str(clause);
        }
        text.push('.');
        if rng.gen_bool(0.5) {
            text.push(' ');
            text.push_str(pick(&CLOSERS, rng));
        }
        text
    } else {
        let vague: [&str; 6] = [
            "the line starts near its average and wanders from there",
            "values move, pause, and move again across the span",
            "the curve traces a winding path from left to right",
            "readings come and go without obvious commentary",
            "early points give way to later ones with visible movement",
            "the plot meanders through its range at its own pace",
        ];
        format!(
            "{} {}{}{}. {}",
            pick(&INTROS, rng),
            vague[rng.gen_range(0..vague.len())],
            pick(&CONNECTIVES, rng),
            vague[rng.gen_range(0..vague.len())],
            pick(&CLOSERS, rng)
        )
    };
    CaptionRecord {
        series_id: series.series_id.clone(),
        instruction_id,
        caption,
        source: if series.context.is_some() {
            CaptionSource::Contextual
        } else {
            CaptionSource::Pure
        },
        captioner: CaptionerKind::Aware,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssembleOptions {
    pub n_pure: usize,
    pub n_contextual: usize,
    pub captioner: CaptionerKind,
    pub seed: u64,
    /// `false` drops attribute grounding (the "- Attributes" ablation).
    pub attribute_augmentation: bool,
    #[serde(skip)]
    pub external: Option<ExternalConfig>,
}

impl AssembleOptions {
    pub fn offline(n_pure: usize, n_contextual: usize, captioner: CaptionerKind, seed: u64) -> Self {
        AssembleOptions {
            n_pure,
            n_contextual,
            captioner,
            seed,
            attribute_augmentation: true,
            external: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub captioner: CaptionerKind,
    pub attribute_augmentation: bool,
    pub records: usize,
    pub failures: usize,
    pub counts_by_source: BTreeMap<String, usize>,
    pub counts_by_captioner: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct CaptionDataset {
    pub records: Vec<CaptionRecord>,
    pub series: Vec<TimeSeries>,
    pub manifest: DatasetManifest,
}

impl CaptionDataset {
    pub fn series_by_id(&self, id: &str) -> Option<&TimeSeries> {
        self.series.iter().find(|s| s.series_id == id)
    }
}

/// Random series spec for alignment data; short lengths keep fused
/// sequences cheap.
fn dataset_spec(index: usize, seed: u64, rng: &mut ChaCha8Rng) -> SeriesSpec {
    let direction = match rng.gen_range(0..3) {
        0 => TrendDirection::Up,
        1 => TrendDirection::Down,
        _ => TrendDirection::Flat,
    };
    let amplitude = rng.gen_range(1.0..3.0);
    let with_season = rng.gen_bool(0.6);
    let anomaly = rng.gen_bool(0.25);
    let length = 64 + 32 * rng.gen_range(0..2) as usize;
    let noise_scale = if with_season { amplitude } else { 1.0 };
    SeriesSpec {
        length,
        trend: TrendSpec {
            direction,
            slope: rng.gen_range(0.04..0.15),
        },
        seasonal: with_season.then_some(SeasonalSpec {
            period: rng.gen_range(8..=20),
            amplitude,
        }),
        noise_std: rng.gen_range(0.02..0.35) * noise_scale,
        anomalies: if anomaly {
            vec![synth::AnomalySpec {
                position: rng.gen_range(4..length - 4),
                magnitude: rng.gen_range(6.0..9.0)
                    * noise_scale
                    * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            }]
        } else {
            Vec::new()
        },
        base_level: rng.gen_range(-4.0..4.0),
        rng_seed: seed.wrapping_add(index as u64).wrapping_mul(0x9E37_79B9),
    }
}

/// Generate and caption a dataset of pure and contextual series.
pub fn assemble_dataset(opts: &AssembleOptions) -> Result<CaptionDataset> {
    if opts.n_pure == 0 && opts.n_contextual == 0 {
        return Err(Error::config("dataset needs at least one record"));
    }
    let bank = PromptBank::default();
    bank.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let total = opts.n_pure + opts.n_contextual;
    let mut series_store = Vec::with_capacity(total);
    let mut attrs_store = Vec::with_capacity(total);
    for index in 0..total {
        let spec = dataset_spec(index, opts.seed, &mut rng);
        let (mut series, attrs) = synth::generate_series(&spec)?;
        let source = if index < opts.n_pure {
            series.series_id = format!("pure-{}-{index:05}", opts.seed);
            CaptionSource::Pure
        } else {
            series.series_id = format!("ctx-{}-{index:05}", opts.seed);
            let tag = DOMAIN_TAGS[rng.gen_range(0..DOMAIN_TAGS.len())];
            let context = synth::generate_context(tag, &attrs, &mut rng)?;
            series = series.with_context(context).with_domain(tag);
            CaptionSource::Contextual
        };
        series_store.push((series, source));
        attrs_store.push(attrs);
    }

    let mut records = Vec::with_capacity(total);
    let mut failures = 0usize;
    match opts.captioner {
        CaptionerKind::Template => {
            for ((series, _), attrs) in series_store.iter().zip(&attrs_store) {
                records.push(caption_template(series, attrs, &mut rng));
            }
        }
        CaptionerKind::Aware => {
            for ((series, _), attrs) in series_store.iter().zip(&attrs_store) {
                let (iid, _) = bank.sample(&mut rng)?;
                records.push(caption_aware(
                    series,
                    attrs,
                    iid,
                    opts.attribute_augmentation,
                    &mut rng,
                ));
            }
        }
        CaptionerKind::External => {
            let config = match &opts.external {
                Some(cfg) => cfg.clone(),
                None => ExternalConfig::from_env()?,
            };
            let client = ExternalCaptioner::new(config)?;
            let mut jobs = Vec::with_capacity(total);
            let mut ids = Vec::with_capacity(total);
            for ((series, _), attrs) in series_store.iter().zip(&attrs_store) {
                let (iid, text) = if opts.attribute_augmentation {
                    bank.sample(&mut rng)?
                } else {
                    (0, bank.base_instruction.as_str())
                };
                let mut instruction = text.to_string();
                if let Some(ctx) = &series.context {
                    instruction.push_str(&format!(" Context: {ctx}"));
                }
                jobs.push(CaptionJob {
                    instruction,
                    image_png: plot::render_plot_bytes(series)?,
                });
                ids.push(iid);
            }
            let results = client.caption_batch(jobs);
            for ((result, iid), (series, _)) in results.into_iter().zip(ids).zip(&series_store) {
                match result {
                    Ok(caption) => records.push(CaptionRecord {
                        series_id: series.series_id.clone(),
                        instruction_id: iid,
                        caption,
                        source: if series.context.is_some() {
                            CaptionSource::Contextual
                        } else {
                            CaptionSource::Pure
                        },
                        captioner: CaptionerKind::External,
                    }),
                    Err(_) => failures += 1,
                }
            }
        }
    }

    for record in &records {
        record.validate(&bank)?;
    }
    let mut counts_by_source = BTreeMap::new();
    let mut counts_by_captioner = BTreeMap::new();
    for r in &records {
        *counts_by_source
            .entry(
                match r.source {
                    CaptionSource::Pure => "pure",
                    CaptionSource::Contextual => "contextual",
                }
                .to_string(),
            )
            .or_insert(0) += 1;
        *counts_by_captioner.entry(r.captioner.name().to_string()).or_insert(0) += 1;
    }
    let manifest = DatasetManifest {
        seed: opts.seed,
        captioner: opts.captioner,
        attribute_augmentation: opts.attribute_augmentation,
        records: records.len(),
        failures,
        counts_by_source,
        counts_by_captioner,
    };
    Ok(CaptionDataset {
        records,
        series: series_store.into_iter().map(|(s, _)| s).collect(),
        manifest,
    })
}

/// Write `captions.jsonl`, `series.jsonl`, and `manifest.json` into `dir`.
/// The manifest is always written, even for partially failed runs.
pub fn write_caption_dataset(dir: impl AsRef<Path>, dataset: &CaptionDataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join("captions.jsonl"))?);
    for record in &dataset.records {
        writeln!(
            file,
            "{}",
            serde_json::to_string(record).map_err(|e| Error::Parse(e.to_string()))?
        )?;
    }
    file.flush()?;
    write_series_file(dir.join("series.jsonl"), &dataset.series)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&dataset.manifest).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(())
}

pub fn read_caption_dataset(dir: impl AsRef<Path>) -> Result<CaptionDataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| Error::Parse(format!("bad manifest: {e}")))?;
    let series = crate::series::read_series_file(dir.join("series.jsonl"))?;
    let file = std::fs::File::open(dir.join("captions.jsonl"))?;
    let mut records = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CaptionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("captions.jsonl:{}: {e}", lineno + 1)))?;
        records.push(record);
    }
    Ok(CaptionDataset {
        records,
        series,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diversity::{metric_tokenize, mtld, MTLD_TTR_THRESHOLD};

    fn attrs_flat() -> AttributeSet {
        AttributeSet {
            trend_direction: TrendDirection::Flat,
            trend_slope: 0.0,
            period: Some(12),
            noise_level: NoiseLevel::Low,
            anomaly_positions: Vec::new(),
            local_variation_summary: "smooth local movement".into(),
        }
    }

    #[test]
    fn bank_ships_twenty_distinct_instructions() {
        let bank = PromptBank::default();
        bank.validate().unwrap();
        assert_eq!(bank.len(), 20);
        for ins in &bank.instructions {
            let lower = ins.to_lowercase();
            assert!(lower.contains("trend"), "{ins}");
            assert!(lower.contains("noise"), "{ins}");
            assert!(lower.contains("time series"), "{ins}");
        }
        assert!(bank.instructions[0].starts_with("Write a paragraph that analyzes"));
        assert!(bank.instructions[19].ends_with("relevant descriptive elements."));
    }

    #[test]
    fn build_instruction_names_all_five_attributes() {
        let base = DEFAULT_BASE_INSTRUCTION;
        let out = build_instruction(base, &attrs_flat());
        for name in ATTRIBUTE_NAMES {
            assert!(out.contains(name), "missing `{name}` in `{out}`");
        }
        assert!(out.len() > base.len());
    }

    #[test]
    fn sampling_is_uniform_within_binomial_bounds() {
        let bank = PromptBank::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = vec![0usize; bank.len()];
        for _ in 0..20_000 {
            let (idx, _) = bank.sample(&mut rng).unwrap();
            counts[idx] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            assert!((800..=1200).contains(c), "instruction {i} drawn {c} times");
        }
    }

    #[test]
    fn single_instruction_bank_always_samples_zero() {
        let bank = PromptBank {
            base_instruction: "b".into(),
            instructions: vec!["only".into()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(bank.sample(&mut rng).unwrap().0, 0);
        }
    }

    #[test]
    fn template_caption_mentions_values_and_is_deterministic() {
        let series = TimeSeries::new("t", vec![1.0; 64]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rec = caption_template(&series, &attrs_flat(), &mut rng);
        assert!(rec.caption.contains("flat"));
        assert!(rec.caption.contains("12"));
        assert!(rec.caption.contains("low"));
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let rec2 = caption_template(&series, &attrs_flat(), &mut rng2);
        assert_eq!(rec, rec2);
    }

    #[test]
    fn template_corpus_has_low_mtld() {
        let opts = AssembleOptions::offline(500, 500, CaptionerKind::Template, 11);
        let dataset = assemble_dataset(&opts).unwrap();
        assert_eq!(dataset.records.len(), 1000);
        let texts: Vec<Vec<String>> = dataset
            .records
            .iter()
            .map(|r| metric_tokenize(&r.caption))
            .collect();
        let score = mtld(&texts, MTLD_TTR_THRESHOLD).unwrap();
        assert!(score < 60.0, "template MTLD {score}");
    }

    #[test]
    fn aware_caption_deterministic_and_attribute_grounded() {
        let series = TimeSeries::new("t", vec![1.0; 64]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = caption_aware(&series, &attrs_flat(), 4, true, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let b = caption_aware(&series, &attrs_flat(), 4, true, &mut rng2);
        assert_eq!(a, b);
        assert!(a.caption.contains("12") || a.caption.to_lowercase().contains("cycle"));
        assert_eq!(a.instruction_id, 4);
    }

    #[test]
    fn assemble_counts_and_context_contract() {
        let opts = AssembleOptions::offline(100, 100, CaptionerKind::Template, 21);
        let dataset = assemble_dataset(&opts).unwrap();
        assert_eq!(dataset.manifest.records, 200);
        assert_eq!(dataset.manifest.counts_by_source["pure"], 100);
        assert_eq!(dataset.manifest.counts_by_source["contextual"], 100);
        assert_eq!(dataset.manifest.failures, 0);
        for s in &dataset.series {
            let is_ctx = s.series_id.starts_with("ctx-");
            assert_eq!(s.context.is_some(), is_ctx, "{}", s.series_id);
            assert_eq!(s.domain_tag.is_some(), is_ctx);
            if let Some(ctx) = &s.context {
                assert!(!ctx.is_empty());
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let opts = AssembleOptions::offline(8, 8, CaptionerKind::Aware, 2);
        let dataset = assemble_dataset(&opts).unwrap();
        write_caption_dataset(dir.path(), &dataset).unwrap();
        let back = read_caption_dataset(dir.path()).unwrap();
        assert_eq!(back.records, dataset.records);
        assert_eq!(back.series, dataset.series);
        assert_eq!(back.manifest.records, dataset.manifest.records);
    }
}
