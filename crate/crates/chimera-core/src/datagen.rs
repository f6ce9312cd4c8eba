//! Synthetic multi-domain corpus with an engineered information asymmetry.
//!
//! Every image is a small grid of digit cells. The *general view* shows the
//! domain-distinctive layout but replaces every value cell with a
//! placeholder pixel; the *expert view* shows the digits. Value queries
//! (cell lookup, series argmax, operand sum) therefore cannot be answered
//! from the general view — their answers are uniform given it — while the
//! matching expert view determines them exactly. That asymmetry is what
//! makes expert-token reliance measurable downstream.
//!
//! Split assignment is a pure function of sample content (hash-bucketed),
//! so equal content can never land in two different splits and generation
//! remains shard-parallel: sample `i` depends only on `(seed, i)`.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::CorpusSpec;
use crate::error::{ChimeraError, Result};
use crate::rng;

pub const GENERATOR_VERSION: &str = "1";

/// Text-side token alphabet shared by instructions and answers.
pub mod vocab {
    pub const PAD: u32 = 0;
    pub const EOS: u32 = 1;
    pub const DIGIT_BASE: u32 = 2; // digits 0..9 occupy 2..=11
    pub const Q_TABLE: u32 = 12;
    pub const Q_CHART: u32 = 13;
    pub const Q_MATH: u32 = 14;
    pub const Q_GENERAL: u32 = 15;
    pub const DESCRIBE: u32 = 16;
    pub const ROW_SEP: u32 = 17;
    pub const OP_PLUS: u32 = 18;
    pub const PATTERN_BASE: u32 = 19; // pattern classes occupy 19..=22
    pub const MIN_VOCAB: u32 = 23;

    pub fn digit(d: u8) -> u32 {
        debug_assert!(d < 10);
        DIGIT_BASE + d as u32
    }
}

/// Pixel alphabet of rendered views.
pub mod pix {
    pub const PAD: u8 = 0;
    /// A redacted value cell.
    pub const VALUE: u8 = 1;
    pub const ROW_SEP: u8 = 2;
    pub const TICK: u8 = 3;
    pub const OP: u8 = 4;
    pub const DIGIT_BASE: u8 = 5; // digits 0..9 occupy 5..=14
    pub const VOCAB: usize = 15;

    pub fn digit(d: u8) -> u8 {
        debug_assert!(d < 10);
        DIGIT_BASE + d
    }
}

pub const NUM_PATTERNS: u8 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    General,
    Table,
    Chart,
    Math,
}

impl DomainKind {
    pub fn name(self) -> &'static str {
        match self {
            DomainKind::General => "general",
            DomainKind::Table => "table",
            DomainKind::Chart => "chart",
            DomainKind::Math => "math",
        }
    }
}

/// A domain together with its router class. Class 0 is reserved for
/// "general / no expert invoked"; classes 1.. map one-to-one onto the
/// registered experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainLabel {
    pub id: usize,
    pub kind: DomainKind,
}

impl DomainLabel {
    pub fn resolve(spec: &CorpusSpec, kind: DomainKind) -> Result<Self> {
        let id = spec
            .class_of(kind)
            .ok_or_else(|| ChimeraError::data(format!("domain {kind:?} not registered")))?;
        Ok(DomainLabel { id, kind })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Alignment,
    Instruction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// A synthetic "image": a digit grid plus its domain and a layout
/// signature that is a deterministic function of (domain, grid).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoImage {
    pub domain: DomainKind,
    pub rows: usize,
    pub cols: usize,
    /// Row-major cell values in 0..=9.
    pub grid: Vec<u8>,
    pub layout_signature: Vec<i64>,
}

impl PseudoImage {
    pub fn new(domain: DomainKind, rows: usize, cols: usize, grid: Vec<u8>) -> Self {
        assert_eq!(grid.len(), rows * cols, "grid shape mismatch");
        assert!(grid.iter().all(|&v| v < 10), "cells must be digits");
        let layout_signature = layout_signature(domain, rows, cols, &grid);
        PseudoImage { domain, rows, cols, grid, layout_signature }
    }

    pub fn cell(&self, r: usize, c: usize) -> u8 {
        self.grid[r * self.cols + c]
    }
}

/// General-domain pattern bit at (r, c) for pattern class `p`.
fn pattern_bit(p: u8, r: usize, c: usize, side: usize) -> bool {
    match p {
        0 => r % 2 == 0,            // horizontal stripes
        1 => c % 2 == 0,            // vertical stripes
        2 => (r + c) % 2 == 0,      // checkerboard
        _ => r < side / 2 && c < side / 2, // corner block
    }
}

/// Recovers the pattern class of a general-domain grid. Cells encode
/// `bit * 5 + noise`, so the bit plane is `cell >= 5`.
pub fn pattern_class(rows: usize, cols: usize, grid: &[u8]) -> Option<u8> {
    (0..NUM_PATTERNS).find(|&p| {
        (0..rows).all(|r| {
            (0..cols).all(|c| (grid[r * cols + c] >= 5) == pattern_bit(p, r, c, rows))
        })
    })
}

fn layout_signature(domain: DomainKind, rows: usize, cols: usize, grid: &[u8]) -> Vec<i64> {
    match domain {
        DomainKind::General => {
            let p = pattern_class(rows, cols, grid).expect("general grid must encode a pattern");
            vec![0, rows as i64, cols as i64, p as i64]
        }
        DomainKind::Table => vec![1, rows as i64, cols as i64],
        DomainKind::Chart => vec![2, cols as i64],
        DomainKind::Math => vec![3, cols as i64],
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub image: PseudoImage,
    pub instruction: Vec<u32>,
    pub answer: Vec<u32>,
    pub stage_tag: StageTag,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountEntry {
    pub domain: DomainKind,
    pub stage_tag: StageTag,
    pub split: Split,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub version: String,
    pub counts: Vec<CountEntry>,
    pub vocab_size: usize,
    pub content_hash: String,
}

impl CorpusManifest {
    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.n).sum()
    }
}

/// Rendered general view: a fixed-length pixel sequence where every value
/// cell is replaced by [`pix::VALUE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneralGrid {
    pub pixels: Vec<u8>,
}

/// Rendered expert view: full-fidelity pixels including digit cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertGrid {
    pub domain: DomainKind,
    pub pixels: Vec<u8>,
}

/// Layout pixels per domain, with `value` substituted at value-cell
/// positions (the placeholder for general views, the digit for expert
/// views).
fn render_pixels(image: &PseudoImage, redact: bool) -> Vec<u8> {
    let val = |v: u8| if redact { pix::VALUE } else { pix::digit(v) };
    match image.domain {
        DomainKind::General => image.grid.iter().map(|&v| pix::digit(v)).collect(),
        DomainKind::Table => {
            if redact {
                // general view: one placeholder per cell plus row structure
                let mut out = Vec::with_capacity(image.rows * (image.cols + 1));
                for r in 0..image.rows {
                    for _ in 0..image.cols {
                        out.push(pix::VALUE);
                    }
                    let _ = r;
                    out.push(pix::ROW_SEP);
                }
                out
            } else {
                // expert view: addressed cells, one (row, col, value) digit
                // triplet each — the structured extraction an expert yields
                let mut out = Vec::with_capacity(image.rows * (3 * image.cols + 1));
                for r in 0..image.rows {
                    for c in 0..image.cols {
                        out.push(pix::digit(r as u8 + 1));
                        out.push(pix::digit(c as u8 + 1));
                        out.push(pix::digit(image.cell(r, c)));
                    }
                    out.push(pix::ROW_SEP);
                }
                out
            }
        }
        DomainKind::Chart => {
            let mut out = vec![pix::TICK];
            out.extend(image.grid.iter().map(|&v| val(v)));
            out
        }
        DomainKind::Math => {
            // the two operands joined by the operator, then a separator and
            // the decoration cells
            let mut out = vec![val(image.grid[0]), pix::OP, val(image.grid[1])];
            if image.cols > 2 {
                out.push(pix::ROW_SEP);
                out.extend(image.grid.iter().skip(2).map(|&v| val(v)));
            }
            out
        }
    }
}

/// The general encoder's input: layout and domain-indicative structure
/// with every value cell redacted, padded to a fixed canvas length.
pub fn render_general_view(image: &PseudoImage, n_tokens: usize) -> GeneralGrid {
    let mut pixels = render_pixels(image, true);
    assert!(pixels.len() <= n_tokens, "layout exceeds the view canvas");
    pixels.resize(n_tokens, pix::PAD);
    GeneralGrid { pixels }
}

/// The matching expert's input: the full-fidelity grid.
pub fn render_expert_view(domain: DomainKind, image: &PseudoImage) -> Result<ExpertGrid> {
    if domain == DomainKind::General {
        return Err(ChimeraError::NoExpert("class 0 invokes no expert".into()));
    }
    if domain != image.domain {
        return Err(ChimeraError::Routing(format!(
            "expert {domain:?} asked to encode a {:?} image",
            image.domain
        )));
    }
    Ok(ExpertGrid { domain, pixels: render_pixels(image, false) })
}

/// Builds (instruction, answer) token sequences for an image at a stage.
/// The rng draws only the query parameters (the table cell coordinate).
pub fn make_targets(
    image: &PseudoImage,
    stage: StageTag,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, Vec<u32>) {
    use vocab::*;
    match stage {
        StageTag::Alignment => {
            let instruction = vec![DESCRIBE];
            let mut answer = Vec::new();
            match image.domain {
                DomainKind::General => {
                    let p = pattern_class(image.rows, image.cols, &image.grid).unwrap();
                    answer.push(PATTERN_BASE + p as u32);
                }
                DomainKind::Table => {
                    for r in 0..image.rows {
                        for c in 0..image.cols {
                            answer.push(digit(image.cell(r, c)));
                        }
                        answer.push(ROW_SEP);
                    }
                }
                DomainKind::Chart => {
                    answer.extend(image.grid.iter().map(|&v| digit(v)));
                }
                DomainKind::Math => {
                    answer.push(digit(image.grid[0]));
                    answer.push(OP_PLUS);
                    answer.push(digit(image.grid[1]));
                    if image.cols > 2 {
                        answer.push(ROW_SEP);
                        answer.extend(image.grid.iter().skip(2).map(|&v| digit(v)));
                    }
                }
            }
            answer.push(EOS);
            (instruction, answer)
        }
        StageTag::Instruction => match image.domain {
            DomainKind::General => {
                let p = pattern_class(image.rows, image.cols, &image.grid).unwrap();
                (vec![Q_GENERAL], vec![PATTERN_BASE + p as u32, EOS])
            }
            DomainKind::Table => {
                // 1-indexed cell query
                let r = rng.random_range(1..=image.rows as u8);
                let c = rng.random_range(1..=image.cols as u8);
                let v = image.cell(r as usize - 1, c as usize - 1);
                (vec![Q_TABLE, digit(r), digit(c)], vec![digit(v), EOS])
            }
            DomainKind::Chart => {
                let pos = argmax_position(&image.grid);
                (vec![Q_CHART], vec![digit(pos as u8 + 1), EOS])
            }
            DomainKind::Math => {
                let v = (image.grid[0] + image.grid[1]) % 10;
                (vec![Q_MATH], vec![digit(v), EOS])
            }
        },
    }
}

/// Positions of the grid's value cells within the rendered expert-view
/// pixel stream, in row-major grid order.
pub fn value_cell_positions(image: &PseudoImage) -> Vec<usize> {
    match image.domain {
        DomainKind::General => (0..image.grid.len()).collect(),
        DomainKind::Table => (0..image.rows)
            .flat_map(|r| {
                (0..image.cols).map(move |c| r * (3 * image.cols + 1) + 3 * c + 2)
            })
            .collect(),
        DomainKind::Chart => (1..=image.cols).collect(),
        DomainKind::Math => {
            // [a, OP, b, SEP, decorations...]
            let mut pos = vec![0, 2];
            pos.extend((0..image.cols.saturating_sub(2)).map(|i| 4 + i));
            pos
        }
    }
}

/// 0-indexed position of the (unique) maximum.
pub fn argmax_position(series: &[u8]) -> usize {
    let mut best = 0usize;
    for (i, &v) in series.iter().enumerate().skip(1) {
        if v > series[best] {
            best = i;
        }
    }
    best
}

fn has_unique_max(series: &[u8]) -> bool {
    let m = *series.iter().max().unwrap();
    series.iter().filter(|&&v| v == m).count() == 1
}

/// Draws a fresh image in the given domain.
pub fn sample_image(spec: &CorpusSpec, domain: DomainKind, rng: &mut ChaCha8Rng) -> PseudoImage {
    match domain {
        DomainKind::General => {
            let side = spec.general_side;
            let p = rng.random_range(0..NUM_PATTERNS);
            let grid = (0..side * side)
                .map(|i| {
                    let (r, c) = (i / side, i % side);
                    let noise = rng.random_range(0..5u8);
                    if pattern_bit(p, r, c, side) {
                        5 + noise
                    } else {
                        noise
                    }
                })
                .collect();
            PseudoImage::new(domain, side, side, grid)
        }
        DomainKind::Table => {
            let grid = (0..spec.table_rows * spec.table_cols)
                .map(|_| rng.random_range(0..10u8))
                .collect();
            PseudoImage::new(domain, spec.table_rows, spec.table_cols, grid)
        }
        DomainKind::Chart => loop {
            let series: Vec<u8> =
                (0..spec.chart_len).map(|_| rng.random_range(0..10u8)).collect();
            if has_unique_max(&series) {
                break PseudoImage::new(domain, 1, spec.chart_len, series);
            }
        },
        DomainKind::Math => {
            let n = 2 + spec.math_decorations;
            let grid = (0..n).map(|_| rng.random_range(0..10u8)).collect();
            PseudoImage::new(domain, 1, n, grid)
        }
    }
}

/// The split-defining content of a sample: everything except its index and
/// the split itself.
fn content_key(image: &PseudoImage, instruction: &[u32], answer: &[u32], stage: StageTag) -> String {
    serde_json::to_string(&(image, instruction, answer, stage)).expect("content serializes")
}

pub fn content_hash_hex(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(content.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash-bucketed split of a content key; equal content always lands in the
/// same split, so splits are disjoint by construction.
pub fn split_of_content(content: &str) -> Split {
    let mut h = Sha256::new();
    h.update(b"split:");
    h.update(content.as_bytes());
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().unwrap()) % 10_000;
    if x < 7_000 {
        Split::Train
    } else if x < 8_500 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generates the corpus: exact per-(domain, stage, split) counts,
/// deterministic in `seed`, shard-parallelizable per sample.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<(CorpusManifest, Vec<Sample>)> {
    spec.validate()?;
    let mut samples = Vec::new();
    let mut counts = Vec::new();
    let mut index: u64 = 0;
    let mut corpus_hasher = Sha256::new();
    for stage in [StageTag::Alignment, StageTag::Instruction] {
        let per_domain = match stage {
            StageTag::Alignment => spec.alignment,
            StageTag::Instruction => spec.instruction,
        };
        for split in Split::ALL {
            let n = match split {
                Split::Train => per_domain.train,
                Split::Val => per_domain.val,
                Split::Test => per_domain.test,
            };
            for domain in spec.domains() {
                for _ in 0..n {
                    let mut r = rng::stream(seed, "sample", index);
                    // rejection-sample until the content's hash bucket
                    // matches the split we are filling
                    let sample = loop {
                        let image = sample_image(spec, domain, &mut r);
                        let (instruction, answer) = make_targets(&image, stage, &mut r);
                        let key = content_key(&image, &instruction, &answer, stage);
                        if split_of_content(&key) == split {
                            break Sample {
                                id: index,
                                image,
                                instruction,
                                answer,
                                stage_tag: stage,
                                split,
                            };
                        }
                    };
                    let line = serde_json::to_string(&sample)?;
                    corpus_hasher.update(line.as_bytes());
                    corpus_hasher.update(b"\n");
                    samples.push(sample);
                    index += 1;
                }
                if n > 0 {
                    counts.push(CountEntry { domain, stage_tag: stage, split, n });
                }
            }
        }
    }
    let content_hash: String =
        corpus_hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let manifest = CorpusManifest {
        seed,
        version: GENERATOR_VERSION.to_string(),
        counts,
        vocab_size: spec.vocab_size,
        content_hash,
    };
    Ok((manifest, samples))
}

// ---- persistence ----

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `corpus.jsonl` (one sample per line) and `manifest.json`.
pub fn write_corpus(
    dir: &std::path::Path,
    manifest: &CorpusManifest,
    samples: &[Sample],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(CORPUS_FILE))?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load_corpus(dir: &std::path::Path) -> Result<(CorpusManifest, Vec<Sample>)> {
    let manifest: CorpusManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let f = std::io::BufReader::new(std::fs::File::open(dir.join(CORPUS_FILE))?);
    let mut samples = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StageCounts;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            alignment: StageCounts { train: 0, val: 0, test: 0 },
            instruction: StageCounts { train: 100, val: 0, test: 0 },
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn counts_sum_to_domains_times_n() {
        let (manifest, samples) = generate_corpus(&small_spec(), 7).unwrap();
        assert_eq!(manifest.total(), 400);
        assert_eq!(samples.len(), 400);
    }

    #[test]
    fn same_seed_same_hash() {
        let (m1, _) = generate_corpus(&small_spec(), 7).unwrap();
        let (m2, _) = generate_corpus(&small_spec(), 7).unwrap();
        assert_eq!(m1.content_hash, m2.content_hash);
        let (m3, _) = generate_corpus(&small_spec(), 8).unwrap();
        assert_ne!(m1.content_hash, m3.content_hash);
    }

    #[test]
    fn table_grids_match_spec_shape() {
        let (_, samples) = generate_corpus(&small_spec(), 7).unwrap();
        for s in samples.iter().filter(|s| s.image.domain == DomainKind::Table) {
            assert_eq!((s.image.rows, s.image.cols), (3, 4));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = small_spec();
        spec.expert_domains.clear();
        assert!(generate_corpus(&spec, 1).is_err());
        let mut spec = small_spec();
        spec.vocab_size = 5;
        assert!(generate_corpus(&spec, 1).is_err());
    }

    fn table_2x2(vals: [u8; 4]) -> PseudoImage {
        PseudoImage::new(DomainKind::Table, 2, 2, vals.to_vec())
    }

    #[test]
    fn general_view_redacts_all_digits() {
        let img = table_2x2([3, 7, 1, 4]);
        let view = render_general_view(&img, 16);
        let placeholders = view.pixels.iter().filter(|&&p| p == pix::VALUE).count();
        assert_eq!(placeholders, 4);
        assert!(view.pixels.iter().all(|&p| !(pix::DIGIT_BASE..pix::DIGIT_BASE + 10).contains(&p)));
    }

    #[test]
    fn value_blindness_on_value_cells() {
        let a = render_general_view(&table_2x2([3, 7, 1, 4]), 16);
        let b = render_general_view(&table_2x2([9, 0, 2, 8]), 16);
        assert_eq!(a, b);
    }

    #[test]
    fn general_domain_view_is_its_own_pattern() {
        let spec = CorpusSpec::default();
        let mut r = rng::stream(3, "t", 0);
        let img = sample_image(&spec, DomainKind::General, &mut r);
        let view = render_general_view(&img, 16);
        let expected: Vec<u8> = img.grid.iter().map(|&v| pix::digit(v)).collect();
        assert_eq!(view.pixels, expected);
    }

    #[test]
    fn expert_view_carries_addressed_values() {
        let img = table_2x2([3, 7, 1, 4]);
        let view = render_expert_view(DomainKind::Table, &img).unwrap();
        // one (row, col, value) digit triplet per cell, rows separated
        assert_eq!(
            view.pixels,
            vec![
                pix::digit(1), pix::digit(1), pix::digit(3),
                pix::digit(1), pix::digit(2), pix::digit(7),
                pix::ROW_SEP,
                pix::digit(2), pix::digit(1), pix::digit(1),
                pix::digit(2), pix::digit(2), pix::digit(4),
                pix::ROW_SEP,
            ]
        );
        // value positions address exactly the cell digits
        for (cell, &p) in value_cell_positions(&img).iter().enumerate() {
            assert_eq!(view.pixels[p], pix::digit(img.grid[cell]));
        }
    }

    #[test]
    fn expert_view_math_contains_operands() {
        let img = PseudoImage::new(DomainKind::Math, 1, 4, vec![5, 2, 9, 9]);
        let view = render_expert_view(DomainKind::Math, &img).unwrap();
        assert_eq!(view.pixels[0], pix::digit(5));
        assert_eq!(view.pixels[1], pix::OP);
        assert_eq!(view.pixels[2], pix::digit(2));
    }

    #[test]
    fn expert_view_errors() {
        let img = table_2x2([1, 2, 3, 4]);
        assert!(matches!(
            render_expert_view(DomainKind::Chart, &img),
            Err(ChimeraError::Routing(_))
        ));
        let spec = CorpusSpec::default();
        let mut r = rng::stream(4, "t", 0);
        let gen = sample_image(&spec, DomainKind::General, &mut r);
        assert!(matches!(
            render_expert_view(DomainKind::General, &gen),
            Err(ChimeraError::NoExpert(_))
        ));
    }

    #[test]
    fn table_query_answer_is_cell_lookup() {
        // find a generated table sample and re-derive its answer by lookup
        let (_, samples) = generate_corpus(&small_spec(), 11).unwrap();
        let mut checked = 0;
        for s in samples.iter().filter(|s| s.image.domain == DomainKind::Table) {
            assert_eq!(s.instruction[0], vocab::Q_TABLE);
            let r = (s.instruction[1] - vocab::DIGIT_BASE) as usize;
            let c = (s.instruction[2] - vocab::DIGIT_BASE) as usize;
            assert_eq!(s.answer[0], vocab::digit(s.image.cell(r - 1, c - 1)));
            assert_eq!(*s.answer.last().unwrap(), vocab::EOS);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn math_answer_is_sum_mod_ten() {
        let img = PseudoImage::new(DomainKind::Math, 1, 4, vec![5, 2, 0, 0]);
        let mut r = rng::stream(5, "t", 0);
        let (instr, ans) = make_targets(&img, StageTag::Instruction, &mut r);
        assert_eq!(instr, vec![vocab::Q_MATH]);
        assert_eq!(ans, vec![vocab::digit(7), vocab::EOS]);
    }

    #[test]
    fn chart_answer_matches_exhaustive_argmax_oracle() {
        // independent oracle: check every candidate position by comparison
        fn oracle(series: &[u8]) -> usize {
            (0..series.len())
                .find(|&i| series.iter().enumerate().all(|(j, &v)| j == i || v < series[i]))
                .expect("unique max exists")
        }
        let img = PseudoImage::new(DomainKind::Chart, 1, 3, vec![2, 9, 4]);
        let mut r = rng::stream(6, "t", 0);
        let (_, ans) = make_targets(&img, StageTag::Instruction, &mut r);
        assert_eq!(ans[0], vocab::digit(oracle(&[2, 9, 4]) as u8 + 1));
        assert_eq!(ans[0], vocab::digit(2)); // 1-indexed position of the 9
        // sweep short series
        let spec = CorpusSpec::default();
        for i in 0..200u64 {
            let mut r = rng::stream(7, "sweep", i);
            let img = sample_image(&spec, DomainKind::Chart, &mut r);
            let (_, ans) = make_targets(&img, StageTag::Instruction, &mut r);
            assert_eq!(ans[0], vocab::digit(oracle(&img.grid) as u8 + 1));
        }
    }

    #[test]
    fn splits_are_disjoint_by_content() {
        let spec = CorpusSpec {
            alignment: StageCounts { train: 50, val: 10, test: 10 },
            instruction: StageCounts { train: 200, val: 40, test: 40 },
            ..CorpusSpec::default()
        };
        let (_, samples) = generate_corpus(&spec, 13).unwrap();
        let mut by_content: std::collections::HashMap<String, Split> = Default::default();
        for s in &samples {
            let key = content_key(&s.image, &s.instruction, &s.answer, s.stage_tag);
            let h = content_hash_hex(&key);
            if let Some(prev) = by_content.insert(h, s.split) {
                assert_eq!(prev, s.split, "identical content in two splits");
            }
        }
    }

    #[test]
    fn value_query_answers_uniform_given_general_view() {
        // table and math answers are uniform over the ten digits; the chart
        // answer is uniform over its position support
        let spec = CorpusSpec {
            alignment: StageCounts::default(),
            instruction: StageCounts { train: 2500, val: 0, test: 0 },
            ..CorpusSpec::default()
        };
        let (_, samples) = generate_corpus(&spec, 17).unwrap();
        let mut digit_counts = [[0u64; 10]; 2]; // table, math
        let mut pos_counts = vec![0u64; spec.chart_len];
        for s in &samples {
            let a = (s.answer[0] - vocab::DIGIT_BASE) as usize;
            match s.image.domain {
                DomainKind::Table => digit_counts[0][a] += 1,
                DomainKind::Math => digit_counts[1][a] += 1,
                DomainKind::Chart => pos_counts[a - 1] += 1,
                DomainKind::General => {}
            }
        }
        for counts in &digit_counts {
            let (_, p) = crate::stats::chi_square_uniform(counts);
            assert!(p > 0.01, "digit answers skewed: p={p}, counts={counts:?}");
        }
        let (_, p) = crate::stats::chi_square_uniform(&pos_counts);
        assert!(p > 0.01, "chart positions skewed: p={p}, counts={pos_counts:?}");
    }

    #[test]
    fn jsonl_roundtrip_preserves_corpus() {
        let dir = std::env::temp_dir().join(format!("chimera-datagen-{}", std::process::id()));
        let (manifest, samples) = generate_corpus(&small_spec(), 19).unwrap();
        write_corpus(&dir, &manifest, &samples).unwrap();
        let (m2, s2) = load_corpus(&dir).unwrap();
        assert_eq!(manifest, m2);
        assert_eq!(samples, s2);
        std::fs::remove_dir_all(&dir).ok();
    }
}
