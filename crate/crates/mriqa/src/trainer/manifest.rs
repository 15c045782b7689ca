//! Dataset manifests: CSV records of (distorted, reference, score, ref_id)
//! with an optional train/test split column. When the split is absent it is
//! generated 80/20 grouped by reference so no content straddles the split.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub dist_path: PathBuf,
    pub ref_path: PathBuf,
    pub score: f64,
    pub ref_id: String,
    pub split: Split,
}

/// Load a manifest CSV with header `dist_path,ref_path,score,ref_id[,split]`.
/// Paths are resolved relative to the manifest location. Without a split
/// column, references are shuffled with `split_seed` and 80% of them (with
/// all their entries) go to train.
pub fn load_manifest(path: impl AsRef<Path>, split_seed: u64) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Parse(format!("{}: {e}", path.display())),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(c_dist), Some(c_ref), Some(c_score), Some(c_rid)) = (
        col("dist_path"),
        col("ref_path"),
        col("score"),
        col("ref_id"),
    ) else {
        return Err(Error::Parse(format!(
            "{}: header must contain dist_path,ref_path,score,ref_id",
            path.display()
        )));
    };
    let c_split = col("split");

    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |c: usize| -> Result<&str> {
            record
                .get(c)
                .ok_or_else(|| Error::Parse(format!("{}:{line}: missing field", path.display())))
        };
        let score: f64 = field(c_score)?.parse().map_err(|_| {
            Error::Parse(format!(
                "{}:{line}: score '{}' is not a number",
                path.display(),
                record.get(c_score).unwrap_or("")
            ))
        })?;
        if !score.is_finite() {
            return Err(Error::Parse(format!(
                "{}:{line}: score must be finite",
                path.display()
            )));
        }
        let split = match c_split {
            None => Split::Train, // reassigned below
            Some(c) => match field(c)?.to_ascii_lowercase().as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::Parse(format!(
                        "{}:{line}: split '{other}' is neither train nor test",
                        path.display()
                    )))
                }
            },
        };
        entries.push(ManifestEntry {
            dist_path: base.join(field(c_dist)?),
            ref_path: base.join(field(c_ref)?),
            score,
            ref_id: field(c_rid)?.to_string(),
            split,
        });
    }

    if c_split.is_none() {
        assign_split_by_reference(&mut entries, split_seed);
    }
    Ok(entries)
}

/// 80/20 split over distinct ref_ids (first-appearance order, seeded
/// shuffle); every entry of a reference lands on the same side.
pub fn assign_split_by_reference(entries: &mut [ManifestEntry], seed: u64) {
    let mut ref_ids: Vec<String> = Vec::new();
    for e in entries.iter() {
        if !ref_ids.contains(&e.ref_id) {
            ref_ids.push(e.ref_id.clone());
        }
    }
    let mut rng = Rng::new(seed);
    for i in (1..ref_ids.len()).rev() {
        let j = rng.gen_range((i + 1) as u64) as usize;
        ref_ids.swap(i, j);
    }
    let n = ref_ids.len();
    let n_train = if n < 2 {
        n
    } else {
        (((n as f64) * 0.8).round() as usize).clamp(1, n - 1)
    };
    let assignment: HashMap<&str, Split> = ref_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            (
                id.as_str(),
                if i < n_train { Split::Train } else { Split::Test },
            )
        })
        .collect();
    for e in entries.iter_mut() {
        e.split = assignment[e.ref_id.as_str()];
    }
}

/// Write a manifest CSV (paths already relative to its location).
pub fn write_manifest(
    path: impl AsRef<Path>,
    rows: &[(String, String, f64, String)],
) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    writer
        .write_record(["dist_path", "ref_path", "score", "ref_id"])
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    for (dist, reference, score, rid) in rows {
        writer
            .write_record([dist.as_str(), reference.as_str(), &score.to_string(), rid])
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn well_formed_rows_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(
            dir.path(),
            "m.csv",
            "dist_path,ref_path,score,ref_id,split\nd1.png,r1.png,3.5,r1,train\nd2.png,r1.png,2.0,r1,test\n",
        );
        let entries = load_manifest(&p, 0).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].score, 3.5);
        assert_eq!(entries[0].split, Split::Train);
        assert_eq!(entries[1].split, Split::Test);
        assert_eq!(entries[0].dist_path, dir.path().join("d1.png"));
    }

    #[test]
    fn bad_score_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(
            dir.path(),
            "m.csv",
            "dist_path,ref_path,score,ref_id\nd1.png,r1.png,3.5,r1\nd2.png,r2.png,abc,r2\n",
        );
        match load_manifest(&p, 0) {
            Err(Error::Parse(msg)) => {
                assert!(msg.contains(":3:"), "message should name line 3: {msg}");
                assert!(msg.contains("abc"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_columns_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), "m.csv", "dist_path,score\nd1.png,1\n");
        assert!(matches!(load_manifest(&p, 0), Err(Error::Parse(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_manifest("/nonexistent/m.csv", 0),
            Err(Error::Io { .. })
        ));
    }

    // grouping oracle: 10 refs x 5 distortions -> exactly 8 refs in train,
    // 2 in test, and no ref_id on both sides
    #[test]
    fn auto_split_groups_by_reference() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("dist_path,ref_path,score,ref_id\n");
        for r in 0..10 {
            for d in 0..5 {
                body.push_str(&format!("d{r}_{d}.png,r{r}.png,{}.0,ref{r}\n", d + 1));
            }
        }
        let p = write_csv(dir.path(), "m.csv", &body);
        for seed in 0..20 {
            let entries = load_manifest(&p, seed).unwrap();
            let mut train_refs = std::collections::HashSet::new();
            let mut test_refs = std::collections::HashSet::new();
            for e in &entries {
                match e.split {
                    Split::Train => train_refs.insert(e.ref_id.clone()),
                    Split::Test => test_refs.insert(e.ref_id.clone()),
                };
            }
            assert_eq!(train_refs.len(), 8, "seed {seed}");
            assert_eq!(test_refs.len(), 2, "seed {seed}");
            assert!(train_refs.is_disjoint(&test_refs));
            // per-ref entry counts stay intact
            let train_count = entries.iter().filter(|e| e.split == Split::Train).count();
            assert_eq!(train_count, 40);
        }
        // different seeds produce different holdout sets eventually
        let holdout = |seed| {
            let entries = load_manifest(&p, seed).unwrap();
            let mut refs: Vec<String> = entries
                .iter()
                .filter(|e| e.split == Split::Test)
                .map(|e| e.ref_id.clone())
                .collect();
            refs.sort();
            refs.dedup();
            refs
        };
        assert!((1..20).any(|s| holdout(s) != holdout(0)));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.csv");
        write_manifest(
            &p,
            &[
                ("a.png".into(), "r.png".into(), 4.0, "r0".into()),
                ("b.png".into(), "r.png".into(), 2.5, "r0".into()),
            ],
        )
        .unwrap();
        let entries = load_manifest(&p, 7).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].score, 2.5);
        assert_eq!(entries[0].ref_id, "r0");
    }
}
