use nlc::codec::{decode_image_stream, decode_resolution, encode_image, read_stream_header};
use nlc::dwt::{Grid, Wavelet};
use nlc::eval::read_manifest;
use nlc::image::{read_pgm, write_pgm};
use nlc::nets::{L2hVariant, Operators};
use nlc::pipeline::{Mode, TransformSpec};
use nlc::quant::QuantizerConfig;
use nlc::synth::{oriented_edge_corpus, SynthConfig};
use nlc::training::{base_steps, TrainConfig};
use nlc::weights::{OperatorWeights, WeightsMeta};
use nlc::Error;

fn weights(wavelet: Wavelet, variant: L2hVariant, seed: u64) -> OperatorWeights {
    let meta = WeightsMeta::new(wavelet, variant);
    OperatorWeights {
        ops: Operators::random(&meta.net, variant, seed, 0.03),
        quant: base_steps(3, 5.0, &TransformSpec::baseline(wavelet)),
        meta,
    }
}

fn corpus() -> Vec<Grid<f32>> {
    oriented_edge_corpus(&SynthConfig { count: 3, size: 56, seed: 21, ..Default::default() }).unwrap()
}

#[test]
fn every_mode_decodes_to_the_encoder_reconstruction() {
    for wavelet in [Wavelet::LeGall53, Wavelet::Cdf97] {
        for mode in Mode::ALL {
            let variant = mode.l2h().unwrap_or(L2hVariant::Adaptive);
            let w = weights(wavelet, variant, 4);
            let w = mode.uses_operators().then_some(&w);
            for x in corpus() {
                let q = QuantizerConfig::from_base_step(3, 5.0, &wavelet.kernel());
                let enc = encode_image(&x, 3, wavelet, mode, w, &q).unwrap();
                let h = read_stream_header(&enc.bytes).unwrap();
                assert_eq!((h.height, h.width, h.levels, h.mode, h.wavelet), (56, 56, 3, mode, wavelet));
                assert_eq!(decode_image_stream(&enc.bytes, w).unwrap(), enc.reconstruction);
                let ll = decode_resolution(&enc.bytes, 3, w).unwrap();
                assert_eq!((ll.height, ll.width), (7, 7));
            }
        }
    }
}

#[test]
fn streams_refuse_other_weights() {
    let x = corpus().remove(0);
    let a = weights(Wavelet::Cdf97, L2hVariant::Adaptive, 1);
    let b = weights(Wavelet::Cdf97, L2hVariant::Adaptive, 2);
    let enc = encode_image(&x, 3, Wavelet::Cdf97, Mode::Hybrid, Some(&a), &a.quant).unwrap();
    assert!(matches!(decode_image_stream(&enc.bytes, Some(&b)), Err(Error::WeightsMismatch(_))));
    assert!(decode_image_stream(&enc.bytes, None).is_err());
    let c = weights(Wavelet::LeGall53, L2hVariant::Adaptive, 1);
    assert!(encode_image(&x, 3, Wavelet::Cdf97, Mode::Hybrid, Some(&c), &a.quant).is_err());
}

#[test]
fn weight_files_reload_and_code_identically() {
    let dir = std::env::temp_dir().join(format!("nlc_api_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let w = weights(Wavelet::LeGall53, L2hVariant::Linear, 8);
    w.save(dir.join("w.nlw")).unwrap();
    let v = OperatorWeights::load(dir.join("w.nlw")).unwrap();
    assert_eq!(v, w);
    let x = corpus().remove(1);
    let a = encode_image(&x, 3, Wavelet::LeGall53, Mode::H2lPlusLinear, Some(&w), &w.quant).unwrap();
    let b = encode_image(&x, 3, Wavelet::LeGall53, Mode::H2lPlusLinear, Some(&v), &v.quant).unwrap();
    assert_eq!(a.bytes, b.bytes);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn manifest_resolves_relative_paths() {
    let dir = std::env::temp_dir().join(format!("nlc_manifest_{}", std::process::id()));
    std::fs::create_dir_all(dir.join("imgs")).unwrap();
    let images = corpus();
    for (i, x) in images.iter().enumerate() {
        write_pgm(dir.join(format!("imgs/{i}.pgm")), x).unwrap();
    }
    std::fs::write(dir.join("m.txt"), "# corpus\nimgs/0.pgm Cat1\nimgs/1.pgm Cat2\n\nimgs/2.pgm\n").unwrap();
    let m = read_manifest(dir.join("m.txt")).unwrap();
    let labels: Vec<&str> = m.iter().map(|e| e.label.as_str()).collect();
    assert_eq!(labels, ["Cat1", "Cat2", "uncategorised"]);
    for (e, x) in m.iter().zip(&images) {
        assert_eq!(&read_pgm(&e.path).unwrap(), &nlc::image::quantize_8bit(x));
    }
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = TrainConfig::load(root.join("desk.cfg")).unwrap();
    assert_eq!((desk.epochs / desk.lut_period, desk.patch_size, desk.levels), (5, 64, 3));
    let large = TrainConfig::load(root.join("large.cfg")).unwrap();
    assert!(large.epochs > desk.epochs);
    let spec = TransformSpec::baseline(desk.wavelet);
    assert_eq!(spec.mode, Mode::Baseline);
}
