//! Corpus files.
//!
//! A corpus directory holds `vocab.json`, one `scenes/scene_NNNNNN.json` per
//! scene and `referrals.jsonl`. Scene files are JSON objects whose float
//! arrays (`points`, `instance_masks`, `centroids`, `mean_colors`) are
//! base64-encoded little-endian `f64` sequences in row-major order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::referral::Referral;
use super::scene::{Difficulty, Scene};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f64(text: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Invalid(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Invalid(format!("{} bytes is not a whole f64 array", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    id: usize,
    num_points: usize,
    num_instances: usize,
    points: String,
    instance_masks: String,
    instance_class: Vec<usize>,
    instance_color: Vec<usize>,
    centroids: String,
    mean_colors: String,
}

pub fn scene_to_json(scene: &Scene) -> Result<String> {
    let flat3 = |v: &[[f64; 3]]| v.iter().flatten().copied().collect::<Vec<_>>();
    let file = SceneFile {
        id: scene.id,
        num_points: scene.num_points(),
        num_instances: scene.num_instances(),
        points: encode_f64(scene.points.data()),
        instance_masks: encode_f64(scene.instance_masks.data()),
        instance_class: scene.instance_class.clone(),
        instance_color: scene.instance_color.clone(),
        centroids: encode_f64(&flat3(&scene.centroids)),
        mean_colors: encode_f64(&flat3(&scene.mean_colors)),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn scene_from_json(text: &str) -> Result<Scene> {
    let f: SceneFile = serde_json::from_str(text)?;
    let (n, k) = (f.num_points, f.num_instances);
    let points = Tensor::new([n, 6], decode_f64(&f.points)?)?;
    let masks = Tensor::new([k, n], decode_f64(&f.instance_masks)?)?;
    let triples = |s: &str| -> Result<Vec<[f64; 3]>> {
        let v = decode_f64(s)?;
        if v.len() != k * 3 {
            return Err(Error::Invalid(format!("expected {} values, got {}", k * 3, v.len())));
        }
        Ok(v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    };
    if f.instance_class.len() != k || f.instance_color.len() != k {
        return Err(Error::Invalid("per-instance arrays disagree with num_instances".into()));
    }
    Ok(Scene {
        id: f.id,
        points,
        instance_masks: masks,
        instance_class: f.instance_class,
        instance_color: f.instance_color,
        centroids: triples(&f.centroids)?,
        mean_colors: triples(&f.mean_colors)?,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferralLine {
    scene_id: usize,
    tokens: Vec<u32>,
    span: Vec<u8>,
    target: usize,
    difficulty: Difficulty,
    view_dependent: bool,
    #[serde(default)]
    n_distractors: Option<usize>,
}

pub fn referral_to_json(r: &Referral) -> Result<String> {
    Ok(serde_json::to_string(&ReferralLine {
        scene_id: r.scene_id,
        tokens: r.tokens.clone(),
        span: r.span.iter().map(|&b| u8::from(b)).collect(),
        target: r.target,
        difficulty: r.difficulty,
        view_dependent: r.view_dependent,
        n_distractors: Some(r.n_distractors),
    })?)
}

pub fn referral_from_json(line: &str, scenes: &[Scene]) -> Result<Referral> {
    let l: ReferralLine = serde_json::from_str(line)?;
    if l.span.iter().any(|&b| b > 1) {
        return Err(Error::Invalid("span entries must be 0 or 1".into()));
    }
    let n_distractors = match l.n_distractors {
        Some(n) => n,
        None => scenes
            .get(l.scene_id)
            .filter(|s| l.target < s.num_instances())
            .map(|s| s.distractors(l.target))
            .ok_or_else(|| Error::Invalid(format!("referral to unknown scene {}", l.scene_id)))?,
    };
    Ok(Referral {
        scene_id: l.scene_id,
        tokens: l.tokens,
        span: l.span.into_iter().map(|b| b == 1).collect(),
        target: l.target,
        difficulty: l.difficulty,
        view_dependent: l.view_dependent,
        n_distractors,
    })
}

pub fn write_corpus(dir: &Path, corpus: &Corpus, vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir.join("scenes"))?;
    fs::write(dir.join("vocab.json"), serde_json::to_string_pretty(vocab)?)?;
    for s in &corpus.scenes {
        fs::write(
            dir.join("scenes").join(format!("scene_{:06}.json", s.id)),
            scene_to_json(s)?,
        )?;
    }
    let mut w = BufWriter::new(fs::File::create(dir.join("referrals.jsonl"))?);
    for r in &corpus.referrals {
        writeln!(w, "{}", referral_to_json(r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<(Corpus, Vocabulary)> {
    let vocab: Vocabulary =
        serde_json::from_str::<Vocabulary>(&fs::read_to_string(dir.join("vocab.json"))?)?
            .validated()?;
    let mut names: Vec<_> = fs::read_dir(dir.join("scenes"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    names.sort();
    let scenes = names
        .iter()
        .map(|p| scene_from_json(&fs::read_to_string(p)?))
        .collect::<Result<Vec<_>>>()?;
    let reader = BufReader::new(fs::File::open(dir.join("referrals.jsonl"))?);
    let mut referrals = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            referrals.push(referral_from_json(&line, &scenes)?);
        }
    }
    let corpus = Corpus { scenes, referrals };
    corpus.validate(&vocab)?;
    Ok((corpus, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, GenConfig};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_arrays_round_trip_bitwise(v in proptest::collection::vec(any::<f64>(), 0..64)) {
            let back = decode_f64(&encode_f64(&v)).unwrap();
            prop_assert_eq!(
                back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn corpus_directory_round_trip() {
        let vocab = Vocabulary::new();
        let corpus = generate_corpus(&GenConfig::default(), &vocab, 3, 40).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus, &vocab).unwrap();
        let (back, v2) = read_corpus(dir.path()).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(v2, vocab);
        let first = fs::read(dir.path().join("referrals.jsonl")).unwrap();
        write_corpus(dir.path(), &back, &vocab).unwrap();
        assert_eq!(fs::read(dir.path().join("referrals.jsonl")).unwrap(), first);
    }

    #[test]
    fn referral_line_fields() {
        let line = r#"{"scene_id":0,"tokens":[2,3],"span":[0,1],"target":1,"difficulty":"hard","view_dependent":true}"#;
        let scene = Scene::from_instances(
            0,
            &[(2, 0, vec![[0.0; 6]]), (2, 1, vec![[1.0; 6]])],
            &[],
        )
        .unwrap();
        let r = referral_from_json(line, &[scene]).unwrap();
        assert_eq!(r.span, vec![false, true]);
        assert_eq!(r.n_distractors, 1);
        assert!(referral_from_json(r#"{"scene_id":0,"bogus":1}"#, &[]).is_err());
    }
}
