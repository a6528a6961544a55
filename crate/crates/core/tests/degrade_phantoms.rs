use nnqc_core::degrade::{build_corpus, DegradeParams, QualityBand};
use nnqc_core::fingerprint::{extract_fingerprint, preprocess};
use nnqc_core::phantom::{generate_phantoms, PhantomSpec};

#[test]
fn corpus_reaches_every_band_on_phantoms() {
    let spec = PhantomSpec { n_subjects: 6, ..PhantomSpec::default() };
    let vols = generate_phantoms(&spec).unwrap();
    let fp = extract_fingerprint(&vols, [64, 64]).unwrap();
    let packs: Vec<_> = vols.iter().map(|v| preprocess(v, &fp).unwrap()).collect();
    let bands = QualityBand::all();
    let corpus = build_corpus(&packs, &bands, 11, &DegradeParams::default()).unwrap();
    let requested: usize = packs.iter().map(|p| p.slices.len()).sum::<usize>() * bands.len();
    for b in bands {
        let n = corpus.pairs.iter().filter(|p| p.band == b).count();
        let skipped = corpus.skipped.iter().filter(|s| s.band == b).count();
        println!("band {b}: {n} emitted, {skipped} skipped");
    }
    assert!(corpus.pairs.iter().all(|p| p.band.contains(p.achieved_dsc)));
    assert!(corpus.pairs.len() as f64 >= 0.95 * requested as f64, "{} of {requested}", corpus.pairs.len());
}
