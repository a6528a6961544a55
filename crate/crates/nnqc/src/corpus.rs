//! On-disk degraded-pair corpus: `index.csv`, the degraded masks in
//! `degraded.safetensors` and `corpus.json` with the seed, config digest,
//! skipped bands and a content digest.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use nnqc_core::degrade::{Corpus, DegradedPair, QualityBand};
use nnqc_core::fingerprint::SlicePack;
use nnqc_core::grid::Mask;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_json, write_json};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.csv";
pub const MASKS_FILE: &str = "degraded.safetensors";
pub const META_FILE: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub subject_id: String,
    pub slice_index: usize,
    pub band: u8,
    pub band_lo: f64,
    pub band_hi: f64,
    pub seed: u64,
    pub achieved_dsc: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub subject_id: String,
    pub slice_index: usize,
    pub band: u8,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub seed: u64,
    pub config_sha256: String,
    pub pairs: usize,
    pub skipped: Vec<SkippedRow>,
    pub content_sha256: String,
}

fn row(p: &DegradedPair) -> CorpusRow {
    CorpusRow {
        subject_id: p.subject_id.clone(),
        slice_index: p.slice_index,
        band: p.band.into(),
        band_lo: p.band.lo(),
        band_hi: p.band.hi(),
        seed: p.seed,
        achieved_dsc: p.achieved_dsc,
        ratio: p.ratio,
    }
}

fn key(subject_id: &str, slice_index: usize, band: u8) -> String {
    format!("{subject_id}/{slice_index}/{band}")
}

/// sha256 over every row and degraded mask, in corpus order.
pub fn corpus_digest(pairs: &[DegradedPair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(key(&p.subject_id, p.slice_index, p.band.into()).as_bytes());
        h.update(p.seed.to_le_bytes());
        h.update(p.achieved_dsc.to_le_bytes());
        h.update(p.ratio.to_le_bytes());
        for d in p.degraded.dims() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(p.degraded.data());
    }
    hex::encode(h.finalize())
}

pub fn save_corpus(dir: &Path, corpus: &Corpus, seed: u64, config_sha256: &str) -> Result<CorpusMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&index)?;
    for p in &corpus.pairs {
        w.serialize(row(p))?;
    }
    w.flush().map_err(|e| Error::io(&index, e))?;
    let mut tensors = HashMap::new();
    for p in &corpus.pairs {
        let [x, y, z] = p.degraded.dims();
        let t = Tensor::from_vec(p.degraded.data().to_vec(), (z, y, x), &Device::Cpu)?;
        tensors.insert(key(&p.subject_id, p.slice_index, p.band.into()), t);
    }
    candle_core::safetensors::save(&tensors, dir.join(MASKS_FILE))?;
    let meta = CorpusMeta {
        seed,
        config_sha256: config_sha256.to_string(),
        pairs: corpus.pairs.len(),
        skipped: corpus
            .skipped
            .iter()
            .map(|s| SkippedRow {
                subject_id: s.subject_id.clone(),
                slice_index: s.slice_index,
                band: s.band.into(),
                reason: s.error.to_string(),
            })
            .collect(),
        content_sha256: corpus_digest(&corpus.pairs),
    };
    write_json(&dir.join(META_FILE), &meta)?;
    Ok(meta)
}

/// Reassembles pairs from the stored index and masks plus the slices they
/// were degraded from, then checks the content digest.
pub fn load_corpus(dir: &Path, packs: &[SlicePack]) -> Result<(Vec<DegradedPair>, CorpusMeta)> {
    let meta: CorpusMeta = read_json(&dir.join(META_FILE))?;
    let index = dir.join(INDEX_FILE);
    let mut r = csv::Reader::from_path(&index)?;
    let masks = candle_core::safetensors::load(dir.join(MASKS_FILE), &Device::Cpu)?;
    let by_subject: HashMap<&str, &SlicePack> = packs.iter().map(|p| (p.subject_id.as_str(), p)).collect();
    let mut pairs = Vec::new();
    for rec in r.deserialize() {
        let row: CorpusRow = rec?;
        let pack = by_subject
            .get(row.subject_id.as_str())
            .ok_or_else(|| Error::Format(format!("corpus subject {} not in dataset", row.subject_id)))?;
        let slice = pack
            .slices
            .get(row.slice_index)
            .ok_or_else(|| Error::Format(format!("{} has no slice {}", row.subject_id, row.slice_index)))?;
        let k = key(&row.subject_id, row.slice_index, row.band);
        let t = masks.get(&k).ok_or_else(|| Error::Format(format!("corpus lacks mask {k}")))?;
        let [x, y, z] = slice.mask.dims();
        let degraded = Mask::from_vec([x, y, z], t.flatten_all()?.to_vec1::<u8>()?)?;
        pairs.push(DegradedPair {
            subject_id: row.subject_id,
            slice_index: row.slice_index,
            image: slice.image.clone(),
            gt: slice.mask.clone(),
            degraded,
            ratio: row.ratio,
            band: QualityBand::try_from(row.band)?,
            achieved_dsc: row.achieved_dsc,
            seed: row.seed,
        });
    }
    let found = corpus_digest(&pairs);
    if found != meta.content_sha256 {
        return Err(Error::Digest(format!("corpus at {} digests to {found}, expected {}", dir.display(), meta.content_sha256)));
    }
    Ok((pairs, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nnqc_core::degrade::{build_corpus, DegradeParams};
    use nnqc_core::fingerprint::{extract_fingerprint, preprocess};
    use nnqc_core::phantom::{generate_phantoms, PhantomSpec};

    #[test]
    fn round_trip_preserves_digest() {
        let spec = PhantomSpec {
            n_subjects: 2,
            grid: [32, 32],
            slices: (4, 5),
            ..PhantomSpec::default()
        };
        let vols = generate_phantoms(&spec).unwrap();
        let fp = extract_fingerprint(&vols, [32, 32]).unwrap();
        let packs: Vec<_> = vols.iter().map(|v| preprocess(v, &fp).unwrap()).collect();
        let corpus = build_corpus(&packs, &[QualityBand::all()[4]], 3, &DegradeParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = save_corpus(dir.path(), &corpus, 3, "cfg").unwrap();
        let (pairs, back) = load_corpus(dir.path(), &packs).unwrap();
        assert_eq!(pairs, corpus.pairs);
        assert_eq!(back, meta);
    }
}
