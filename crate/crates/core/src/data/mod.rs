//! Dataset types, split assignment, and on-disk layout.
//!
//! A dataset directory holds `images/<id>.pgm` (16-bit), `labels/<id>.pgm`
//! (8-bit class indices), and `manifest.tsv` with one tab-separated
//! `id image label split` row per sample plus `# key=value` header lines
//! recording provenance.

pub mod augment;
pub mod morph;
pub mod pgm;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng64;

/// One grayscale image with its per-pixel class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub h: usize,
    pub w: usize,
    /// Row-major intensities in [0, 1].
    pub image: Vec<f64>,
    /// Row-major class indices, same extent as `image`.
    pub label: Vec<u16>,
}

impl ImageSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.image.len() != self.h * self.w || self.label.len() != self.h * self.w {
            return Err(Error::data(format!("sample {}: image/label extent mismatch", self.id)));
        }
        if let Some(&bad) = self.label.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::data(format!("sample {}: label {bad} out of range", self.id)));
        }
        Ok(())
    }

    /// Source id of an augmented crop ("synth00003_x150_f" -> "synth00003").
    pub fn source_id(&self) -> &str {
        match self.id.find("_x") {
            Some(i) => &self.id[..i],
            None => &self.id,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub label_path: String,
    pub split: Split,
}

/// Index of a dataset directory: entries plus provenance header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// `# key=value` header lines, in order.
    pub meta: Vec<(String, String)>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, e.image_path, e.label_path, e.split.name()));
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<DatasetManifest> {
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    meta.push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::data(format!(
                    "{source}:{lineno}: expected 4 tab-separated fields, got {}",
                    fields.len()
                )));
            }
            let split = Split::parse(fields[3])
                .ok_or_else(|| Error::data(format!("{source}:{lineno}: unknown split '{}'", fields[3])))?;
            if !seen.insert(fields[0].to_string()) {
                return Err(Error::data(format!("{source}:{lineno}: duplicate id '{}'", fields[0])));
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                image_path: fields[1].to_string(),
                label_path: fields[2].to_string(),
                split,
            });
        }
        Ok(DatasetManifest { entries, meta })
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Assign splits at the source level: every sample of one source shares a
/// split, so overlapping crops can never leak across the boundary.
/// `fractions` is (train, test) or (train, val, test) and must sum to 1.
pub fn assign_splits(
    source_ids: &[String],
    fractions: &[f64],
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    if source_ids.is_empty() {
        return Err(Error::data("cannot split an empty dataset"));
    }
    if fractions.len() < 2 || fractions.len() > 3 {
        return Err(Error::config("split fractions must be (train, test) or (train, val, test)"));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::config("split fractions must lie in [0, 1]"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions sum to {}, expected 1",
            fractions.iter().sum::<f64>()
        )));
    }
    let kinds: &[Split] = if fractions.len() == 2 {
        &[Split::Train, Split::Test]
    } else {
        &[Split::Train, Split::Val, Split::Test]
    };

    let mut order: Vec<&String> = source_ids.iter().collect();
    let mut rng = Rng64::derive(seed, &[0x7370_6c69_74]);
    rng.shuffle(&mut order);

    let n = order.len();
    // earlier fractions get their floor; the final split takes the rest
    let mut counts: Vec<usize> = fractions[..fractions.len() - 1]
        .iter()
        .map(|f| (f * n as f64).floor() as usize)
        .collect();
    counts.push(n - counts.iter().sum::<usize>());

    let mut out = BTreeMap::new();
    let mut cursor = 0usize;
    for (kind, count) in kinds.iter().zip(counts) {
        for id in &order[cursor..cursor + count] {
            out.insert((*id).clone(), *kind);
        }
        cursor += count;
    }
    Ok(out)
}

/// Write samples and a manifest into `dir`; images as 16-bit PGM, labels as
/// 8-bit PGM with maxval = num_classes - 1.
pub fn save_dataset(
    dir: &Path,
    samples: &[(ImageSample, Split)],
    num_classes: usize,
    meta: Vec<(String, String)>,
) -> Result<DatasetManifest> {
    if num_classes < 2 || num_classes > 256 {
        return Err(Error::config(format!("num_classes {num_classes} out of range 2..=256")));
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (sample, split) in samples {
        sample.validate(num_classes)?;
        let image_path = format!("images/{}.pgm", sample.id);
        let label_path = format!("labels/{}.pgm", sample.id);
        let quantized: Vec<u16> = sample.image.iter().map(|&v| (v * 65_535.0).round() as u16).collect();
        pgm::write_pgm(&dir.join(&image_path), &quantized, sample.w, sample.h, 65_535)?;
        pgm::write_pgm(&dir.join(&label_path), &sample.label, sample.w, sample.h, (num_classes - 1) as u16)?;
        entries.push(ManifestEntry { id: sample.id.clone(), image_path, label_path, split: *split });
    }
    let manifest = DatasetManifest { entries, meta };
    fs::write(dir.join("manifest.tsv"), manifest.to_text())?;
    Ok(manifest)
}

/// Load a dataset directory back into memory.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<(ImageSample, Split)>)> {
    let manifest_path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::data(format!("{}: {e}", manifest_path.display())))?;
    let manifest = DatasetManifest::parse(&text, &manifest_path.display().to_string())?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let (img, w, h, maxval) = pgm::read_pgm(&dir.join(&entry.image_path))?;
        let (label, lw, lh, _) = pgm::read_pgm(&dir.join(&entry.label_path))?;
        if (w, h) != (lw, lh) {
            return Err(Error::data(format!("sample {}: image/label size mismatch", entry.id)));
        }
        let image: Vec<f64> = img.iter().map(|&v| v as f64 / maxval as f64).collect();
        samples.push((
            ImageSample { id: entry.id.clone(), h, w, image, label },
            entry.split,
        ));
    }
    Ok((manifest, samples))
}

/// Resolve a manifest path or dataset directory to its directory.
pub fn dataset_dir(path: &Path) -> PathBuf {
    if path.ends_with("manifest.tsv") {
        path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    } else {
        path.to_path_buf()
    }
}
