//! The JSON manifest describing a domain's concepts and embedding files.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::Domain;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedFile {
    pub prompt_id: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestConcept {
    pub id: String,
    pub name: String,
    pub caption_count: u64,
    /// Reference embeddings (.emb).
    pub refs: String,
    /// Training-candidate embeddings (.emb).
    pub candidates: String,
    pub generated: Vec<GeneratedFile>,
    /// Art domain only: CSV `id,score` of stage-1 artness per candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artness_scores: Option<String>,
}

/// Paths in a manifest are relative to the manifest's own directory unless
/// absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: Domain,
    /// Caption count above which candidates were sampled. Used when the
    /// configuration does not set one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_cap: Option<u64>,
    pub concepts: Vec<ManifestConcept>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(domain: Domain, concepts: Vec<ManifestConcept>) -> Self {
        Manifest {
            domain,
            sample_cap: None,
            concepts,
            base_dir: PathBuf::new(),
        }
    }

    /// Parses and validates a manifest file, including that every referenced
    /// file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::manifest(format!("manifest {} not found", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::manifest(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn concept(&self, id: &str) -> Option<&ManifestConcept> {
        self.concepts.iter().find(|c| c.id == id)
    }

    fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::manifest("manifest lists no concepts"));
        }
        let mut seen = HashSet::new();
        for c in &self.concepts {
            if c.id.is_empty() {
                return Err(Error::manifest("concept with empty id"));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(Error::manifest(format!("duplicate concept id `{}`", c.id)));
            }
            if c.generated.is_empty() {
                return Err(Error::manifest(format!("concept `{}` has no generated files", c.id)));
            }
            let mut prompts = HashSet::new();
            for g in &c.generated {
                if !prompts.insert(g.prompt_id.as_str()) {
                    return Err(Error::manifest(format!(
                        "concept `{}` lists prompt `{}` twice",
                        c.id, g.prompt_id
                    )));
                }
            }
            let files = [("reference", &c.refs), ("candidate", &c.candidates)]
                .into_iter()
                .chain(c.generated.iter().map(|g| ("generated", &g.path)))
                .chain(c.artness_scores.iter().map(|p| ("artness", p)));
            for (kind, rel) in files {
                if !self.resolve(rel).is_file() {
                    return Err(Error::manifest(format!(
                        "concept `{}`: {kind} file {rel} does not exist",
                        c.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reads a CSV of `id,score` rows.
pub fn read_artness_scores(path: &Path) -> Result<std::collections::HashMap<String, f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers()?.clone();
    if header.iter().ne(["id", "score"]) {
        return Err(Error::format(format!(
            "{}: expected header id,score, got {header:?}",
            path.display()
        )));
    }
    let mut out = std::collections::HashMap::new();
    for (i, rec) in r.deserialize::<(String, f64)>().enumerate() {
        let (id, score) = rec.map_err(|e| Error::format(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if out.insert(id.clone(), score).is_some() {
            return Err(Error::format(format!("{}: duplicate id `{id}`", path.display())));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concept(id: &str) -> ManifestConcept {
        ManifestConcept {
            id: id.into(),
            name: id.into(),
            caption_count: 3,
            refs: format!("{id}.refs.emb"),
            candidates: format!("{id}.cands.emb"),
            generated: vec![GeneratedFile {
                prompt_id: "p0".into(),
                path: format!("{id}.gen.emb"),
            }],
            artness_scores: None,
        }
    }

    fn touch_all(dir: &Path, c: &ManifestConcept) {
        for f in [&c.refs, &c.candidates, &c.generated[0].path] {
            std::fs::write(dir.join(f), b"").unwrap();
        }
    }

    #[test]
    fn round_trip_and_missing_file_names_concept() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (concept("a"), concept("b"));
        touch_all(dir.path(), &a);
        touch_all(dir.path(), &b);
        let m = Manifest::new(Domain::Faces, vec![a, b]);
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.concepts, m.concepts);
        assert_eq!(back.resolve("x"), dir.path().join("x"));

        std::fs::remove_file(dir.path().join("b.gen.emb")).unwrap();
        match Manifest::load(&path) {
            Err(Error::Manifest(msg)) => assert!(msg.contains("`b`") && msg.contains("generated"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, r#"{"domain":"faces","concepts":[]}"#).unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Manifest(_))));
        std::fs::write(&path, r#"{"domain":"sculpture","concepts":[]}"#).unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Manifest(_))));
        assert!(matches!(
            Manifest::load(dir.path().join("nope.json")),
            Err(Error::Manifest(_))
        ));

        let a = concept("a");
        touch_all(dir.path(), &a);
        Manifest::new(Domain::Art, vec![a.clone(), a]).save(&path).unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Manifest(m)) if m.contains("duplicate")));
    }

    #[test]
    fn artness_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "id,score\nx,0.5\ny,-0.25\n").unwrap();
        let m = read_artness_scores(&p).unwrap();
        assert_eq!(m["y"], -0.25);
        std::fs::write(&p, "id,score\nx,0.5\nx,0.1\n").unwrap();
        assert!(matches!(read_artness_scores(&p), Err(Error::Format { .. })));
    }
}
