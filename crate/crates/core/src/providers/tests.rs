use super::*;
use crate::data::{caption, CaptionStyle, GENERIC_CAPTION};

fn clips(n: usize) -> Vec<(String, AccidentClass)> {
    (0..n)
        .map(|i| (format!("clip{i:05}"), AccidentClass::ALL[i % NUM_CLASSES]))
        .collect()
}

fn provider(cfg: SyntheticEmbeddingConfig, clips: &[(String, AccidentClass)]) -> SyntheticProvider {
    SyntheticProvider::new(cfg, clips.iter().map(|(id, c)| (id.as_str(), *c))).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[test]
fn generic_caption_is_stable_and_unit() {
    let p = provider(SyntheticEmbeddingConfig::default(), &clips(4));
    let a = p.text_embed(GENERIC_CAPTION).unwrap();
    let b = p.text_embed(GENERIC_CAPTION).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 32);
    assert!((norm(&a) - 1.0).abs() < 1e-12);
}

#[test]
fn zero_noise_collapses_captions_of_a_class() {
    let cfg = SyntheticEmbeddingConfig {
        noise_sigma: 0.0,
        ..SyntheticEmbeddingConfig::default()
    };
    let p = provider(cfg, &clips(4));
    for class in AccidentClass::ALL {
        assert_eq!(
            p.text_embed(caption(CaptionStyle::A, class)).unwrap(),
            p.text_embed(caption(CaptionStyle::B, class)).unwrap()
        );
    }
}

#[test]
fn uninformative_text_equals_global_prototype() {
    let cfg = SyntheticEmbeddingConfig {
        noise_sigma: 0.0,
        text_informativeness: 0.0,
        ..SyntheticEmbeddingConfig::default()
    };
    let p = provider(cfg, &clips(4));
    let global = p.text_embed(GENERIC_CAPTION).unwrap();
    for class in AccidentClass::ALL {
        let v = p.text_embed(caption(CaptionStyle::B, class)).unwrap();
        assert!(v.iter().zip(&global).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}

#[test]
fn video_lookups_are_deterministic_and_checked() {
    let c = clips(8);
    let p = provider(SyntheticEmbeddingConfig::default(), &c);
    assert_eq!(p.video_embed("clip00003").unwrap(), p.video_embed("clip00003").unwrap());
    assert_ne!(p.video_embed("clip00003").unwrap(), p.video_embed("clip00007").unwrap());
    assert!(matches!(p.video_embed("nope"), Err(Error::MissingKey { .. })));
    assert!(matches!(p.text_embed("some other caption"), Err(Error::MissingKey { .. })));
}

#[test]
fn within_class_cosine_exceeds_across_class() {
    let c = clips(100);
    let cfg = SyntheticEmbeddingConfig {
        noise_sigma: 0.1,
        ..SyntheticEmbeddingConfig::default()
    };
    let p = provider(cfg, &c);
    let embs: Vec<Vec<f64>> = c.iter().map(|(id, _)| p.video_embed(id).unwrap()).collect();
    let mut sums = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    let mut counts = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for i in 0..c.len() {
        for j in 0..c.len() {
            if i == j {
                continue;
            }
            let (a, b) = (c[i].1.index(), c[j].1.index());
            sums[a][b] += dot(&embs[i], &embs[j]);
            counts[a][b] += 1;
        }
    }
    for a in 0..NUM_CLASSES {
        let within = sums[a][a] / counts[a][a] as f64;
        for b in (0..NUM_CLASSES).filter(|&b| b != a) {
            assert!(within > sums[a][b] / counts[a][b] as f64, "class {a} vs {b}");
        }
    }
}

#[test]
fn file_provider_round_trips_exported_tables() {
    let c = clips(10);
    let synth = provider(SyntheticEmbeddingConfig::default(), &c);
    let captions = CaptionCatalogue::all_texts();
    let ids: Vec<&str> = c.iter().map(|(id, _)| id.as_str()).collect();
    let (text, video) = export_tables(&synth, &captions, &ids).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (tp, vp) = (dir.path().join("text.stge"), dir.path().join("video.stge"));
    text.save(&tp).unwrap();
    video.save(&vp).unwrap();
    let file = FileProvider::load(&tp, &vp).unwrap();
    for id in &ids {
        let want = synth.video_embed(id).unwrap();
        let got = file.video_embed(id).unwrap();
        assert!(want.iter().zip(&got).all(|(a, b)| (a - b).abs() < 1e-6));
    }
    assert_eq!(file.text_embed(GENERIC_CAPTION).unwrap().len(), 32);
    assert!(matches!(file.video_embed("clip99999"), Err(Error::MissingKey { .. })));
    assert!(FileProvider::new(video.clone(), text.clone()).is_err());
}

#[test]
fn config_validation() {
    let bad = SyntheticEmbeddingConfig {
        dim: 1,
        ..SyntheticEmbeddingConfig::default()
    };
    assert!(SyntheticProvider::new(bad, std::iter::empty()).is_err());
    let bad = SyntheticEmbeddingConfig {
        video_informativeness: 1.5,
        ..SyntheticEmbeddingConfig::default()
    };
    assert!(bad.validate().is_err());
}
