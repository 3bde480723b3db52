//! The embedding table format as seen by an external writer.

use stgi::data::{CaptionCatalogue, GENERIC_CAPTION};
use stgi::providers::{EmbeddingProvider, EmbeddingTable, FileProvider, Modality};

/// Encode a table field by field, independently of the library writer.
fn encode(modality: u8, dim: u32, entries: &[(&str, Vec<f32>)]) -> Vec<u8> {
    let mut out = b"STGE".to_vec();
    out.extend(1u16.to_le_bytes());
    out.push(modality);
    out.extend(dim.to_le_bytes());
    out.extend((entries.len() as u32).to_le_bytes());
    for (key, v) in entries {
        out.extend((key.len() as u16).to_le_bytes());
        out.extend(key.as_bytes());
        for x in v {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

fn unit(dim: usize, k: usize) -> Vec<f32> {
    (0..dim).map(|i| if i == k % dim { 1.0 } else { 0.0 }).collect()
}

#[test]
fn externally_written_tables_load_and_return_every_key() {
    let texts = CaptionCatalogue::all_texts();
    let text_entries: Vec<(&str, Vec<f32>)> = texts.iter().enumerate().map(|(k, t)| (*t, unit(6, k))).collect();
    let clips = ["clip_a", "clip_b", "clip_c"];
    let video_entries: Vec<(&str, Vec<f32>)> = clips.iter().enumerate().map(|(k, c)| (*c, unit(6, k + 2))).collect();

    let dir = tempfile::tempdir().unwrap();
    let (tp, vp) = (dir.path().join("text.stge"), dir.path().join("video.stge"));
    let text_bytes = encode(0, 6, &text_entries);
    std::fs::write(&tp, &text_bytes).unwrap();
    std::fs::write(&vp, encode(1, 6, &video_entries)).unwrap();

    let provider = FileProvider::load(&tp, &vp).unwrap();
    assert_eq!(provider.dim(), 6);
    assert_eq!(provider.text.modality(), Modality::Text);
    assert_eq!(provider.text.len(), texts.len());
    for (k, t) in texts.iter().enumerate() {
        let v = provider.text_embed(t).unwrap();
        assert_eq!(v, unit(6, k).iter().map(|&x| x as f64).collect::<Vec<_>>());
    }
    assert!(provider.text_embed(GENERIC_CAPTION).is_ok());
    for c in clips {
        assert_eq!(provider.video_embed(c).unwrap().len(), 6);
    }
    assert!(provider.video_embed("clip_z").is_err());

    // The external writer used key order too, so re-encoding is byte-identical.
    let mut sorted = text_entries.clone();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    assert_eq!(EmbeddingTable::load(&tp).unwrap().to_bytes(), encode(0, 6, &sorted));
}

#[test]
fn swapped_or_corrupt_tables_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (tp, vp) = (dir.path().join("t.stge"), dir.path().join("v.stge"));
    let entries = [("k", unit(3, 0))];
    std::fs::write(&tp, encode(1, 3, &entries)).unwrap();
    std::fs::write(&vp, encode(0, 3, &entries)).unwrap();
    assert!(FileProvider::load(&tp, &vp).is_err());

    let mut truncated = encode(0, 3, &entries);
    truncated.pop();
    assert!(EmbeddingTable::from_bytes(&truncated).is_err());
    let mut bad_version = encode(0, 3, &entries);
    bad_version[4] = 2;
    assert!(EmbeddingTable::from_bytes(&bad_version).is_err());
}
