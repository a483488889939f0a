//! Content-addressed artifact storage and session bundle export.

use crate::canonical;
use crate::executor::checkpoint::write_atomic;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Script,
    Table,
    Figure,
    Report,
    Log,
}

impl ArtifactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Script => "script",
            ArtifactKind::Table => "table",
            ArtifactKind::Figure => "figure",
            ArtifactKind::Report => "report",
            ArtifactKind::Log => "log",
        }
    }
}

/// What a provider hands back; the store assigns identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactDraft {
    pub kind: ArtifactKind,
    pub media_type: String,
    pub label: String,
    pub bytes: Vec<u8>,
}

impl ArtifactDraft {
    pub fn new(kind: ArtifactKind, media_type: &str, label: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        ArtifactDraft { kind, media_type: media_type.into(), label: label.into(), bytes: bytes.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub artifact_id: String,
    pub session_id: String,
    pub step_index: u32,
    pub kind: ArtifactKind,
    pub media_type: String,
    pub bytes_ref: String,
    pub label: String,
    pub created_at: DateTime<Utc>,
}

impl Artifact {
    pub fn extension(&self) -> &'static str {
        match self.media_type.as_str() {
            "text/x-python" => "py",
            "text/csv" => "csv",
            "application/json" => "json",
            "text/markdown" => "md",
            "image/png" => "png",
            "image/svg+xml" => "svg",
            _ => "txt",
        }
    }

    /// Path of this artifact inside an exported bundle.
    pub fn bundle_path(&self) -> String {
        format!("artifacts/{:02}-{}-{}.{}", self.step_index, self.kind.as_str(), &self.artifact_id[..12], self.extension())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ArtifactError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown artifact {0}")]
    UnknownArtifact(String),
    #[error("blob {0} does not match its digest")]
    CorruptBlob(String),
    #[error("session {0} is not in a terminal state")]
    SessionNotTerminal(String),
    #[error("artifact io: {0}")]
    Io(String),
}

fn io(e: std::io::Error) -> ArtifactError {
    ArtifactError::Io(e.to_string())
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    data_dir: PathBuf,
}

impl ArtifactStore {
    pub fn new(data_dir: &Path) -> Self {
        ArtifactStore { data_dir: data_dir.to_path_buf() }
    }

    fn session_dir(&self, session_id: &str) -> PathBuf {
        self.data_dir.join("sessions").join(session_id)
    }

    fn listing(&self, session_id: &str) -> PathBuf {
        self.session_dir(session_id).join("artifacts.jsonl")
    }

    pub fn blob_path(&self, digest: &str) -> PathBuf {
        let prefix = digest.get(..2).unwrap_or("00");
        self.data_dir.join("blobs").join(prefix).join(digest)
    }

    /// Stores the blob (atomic, deduplicated) and lists it for the session.
    /// Identical bytes for the same step return the existing listing entry.
    pub fn put_artifact(
        &self,
        session_id: &str,
        step_index: u32,
        draft: &ArtifactDraft,
        created_at: DateTime<Utc>,
    ) -> Result<Artifact, ArtifactError> {
        let dir = self.session_dir(session_id);
        if !dir.is_dir() {
            return Err(ArtifactError::UnknownSession(session_id.into()));
        }
        let digest = canonical::sha256_hex(&draft.bytes);
        let blob = self.blob_path(&digest);
        if !blob.exists() {
            fs::create_dir_all(blob.parent().expect("blob dir")).map_err(io)?;
            write_atomic(&blob, &draft.bytes).map_err(io)?;
        }
        if let Some(existing) = self.list(session_id)?.into_iter().find(|a| a.artifact_id == digest) {
            return Ok(existing);
        }
        let artifact = Artifact {
            artifact_id: digest.clone(),
            session_id: session_id.into(),
            step_index,
            kind: draft.kind,
            media_type: draft.media_type.clone(),
            bytes_ref: format!("blobs/{}/{}", &digest[..2], digest),
            label: draft.label.clone(),
            created_at,
        };
        let mut line = canonical::to_canonical_string(&artifact).map_err(|e| ArtifactError::Io(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(self.listing(session_id)).map_err(io)?;
        f.write_all(line.as_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        Ok(artifact)
    }

    pub fn list(&self, session_id: &str) -> Result<Vec<Artifact>, ArtifactError> {
        if !self.session_dir(session_id).is_dir() {
            return Err(ArtifactError::UnknownSession(session_id.into()));
        }
        let text = match fs::read_to_string(self.listing(session_id)) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io(e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| ArtifactError::Io(format!("corrupt listing: {e}"))))
            .collect()
    }

    /// Drops listing entries from steps the checkpoint has not recorded.
    pub fn retain(&self, session_id: &str, keep: impl Fn(&Artifact) -> bool) -> Result<(), ArtifactError> {
        let all = self.list(session_id)?;
        if all.iter().all(&keep) {
            return Ok(());
        }
        let mut text = String::new();
        for a in all.iter().filter(|a| keep(a)) {
            text.push_str(&canonical::to_canonical_string(a).map_err(|e| ArtifactError::Io(e.to_string()))?);
            text.push('\n');
        }
        write_atomic(&self.listing(session_id), text.as_bytes()).map_err(io)
    }

    pub fn read_blob(&self, digest: &str) -> Result<Vec<u8>, ArtifactError> {
        if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ArtifactError::UnknownArtifact(digest.into()));
        }
        let bytes = match fs::read(self.blob_path(digest)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ArtifactError::UnknownArtifact(digest.into()))
            }
            Err(e) => return Err(io(e)),
        };
        if canonical::sha256_hex(&bytes) != digest {
            return Err(ArtifactError::CorruptBlob(digest.into()));
        }
        Ok(bytes)
    }

    /// Metadata for an artifact id, from any session listing.
    pub fn find(&self, artifact_id: &str) -> Result<Artifact, ArtifactError> {
        let sessions = self.data_dir.join("sessions");
        let mut dirs: Vec<_> = match fs::read_dir(&sessions) {
            Ok(rd) => rd.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect(),
            Err(_) => Vec::new(),
        };
        dirs.sort();
        for s in dirs {
            if let Some(a) = self.list(&s)?.into_iter().find(|a| a.artifact_id == artifact_id) {
                return Ok(a);
            }
        }
        Err(ArtifactError::UnknownArtifact(artifact_id.into()))
    }
}

/// Deterministic tar writer: sorted entries, zero mtime/uid/gid, mode 0644.
#[derive(Debug, Default)]
pub struct BundleBuilder {
    entries: Vec<(String, Vec<u8>)>,
}

impl BundleBuilder {
    pub fn add(&mut self, path: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.entries.push((path.into(), bytes.into()));
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.entries.sort_by(|a, b| a.0.cmp(&b.0));
        self.entries.dedup_by(|a, b| a.0 == b.0);
        let mut builder = tar::Builder::new(Vec::new());
        builder.mode(tar::HeaderMode::Deterministic);
        for (path, bytes) in &self.entries {
            let mut header = tar::Header::new_ustar();
            header.set_size(bytes.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_uid(0);
            header.set_gid(0);
            header.set_entry_type(tar::EntryType::Regular);
            builder.append_data(&mut header, path, bytes.as_slice()).expect("in-memory tar write");
        }
        builder.into_inner().expect("in-memory tar finish")
    }
}

/// Entries of a tar archive, for inspection and tests.
pub fn read_bundle(bytes: &[u8]) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut archive = tar::Archive::new(bytes);
    let mut out = Vec::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        std::io::Read::read_to_end(&mut entry, &mut data)?;
        out.push((path, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 8, 9, 0, 0, 0).unwrap()
    }

    fn store() -> (tempfile::TempDir, ArtifactStore) {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sessions/s1")).unwrap();
        let s = ArtifactStore::new(dir.path());
        (dir, s)
    }

    #[test]
    fn identical_bytes_share_an_id() {
        let (_d, s) = store();
        let draft = ArtifactDraft::new(ArtifactKind::Script, "text/x-python", "analysis script", "print(1)\n");
        let a = s.put_artifact("s1", 5, &draft, at()).unwrap();
        let b = s.put_artifact("s1", 5, &draft, at()).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.list("s1").unwrap().len(), 1);
        assert_eq!(a.artifact_id, canonical::sha256_hex(b"print(1)\n"));
        assert_eq!(s.read_blob(&a.artifact_id).unwrap(), b"print(1)\n");
        assert_eq!(s.find(&a.artifact_id).unwrap(), a);
        let other = ArtifactDraft::new(ArtifactKind::Script, "text/x-python", "x", "print(2)\n");
        assert_ne!(s.put_artifact("s1", 5, &other, at()).unwrap().artifact_id, a.artifact_id);
    }

    #[test]
    fn unknown_session_and_artifact() {
        let (_d, s) = store();
        let draft = ArtifactDraft::new(ArtifactKind::Log, "text/plain", "log", "x");
        assert!(matches!(s.put_artifact("nope", 1, &draft, at()), Err(ArtifactError::UnknownSession(_))));
        assert!(matches!(s.read_blob("abc"), Err(ArtifactError::UnknownArtifact(_))));
    }

    #[test]
    fn tampered_blob_is_detected() {
        let (_d, s) = store();
        let draft = ArtifactDraft::new(ArtifactKind::Report, "text/markdown", "report", "# r\n");
        let a = s.put_artifact("s1", 1, &draft, at()).unwrap();
        fs::write(s.blob_path(&a.artifact_id), "# tampered\n").unwrap();
        assert!(matches!(s.read_blob(&a.artifact_id), Err(ArtifactError::CorruptBlob(_))));
    }

    #[test]
    fn bundles_are_deterministic() {
        let build = |order: &[usize]| {
            let files = [("b.txt", "bee"), ("a.txt", "ay"), ("dir/c.json", "{}")];
            let mut b = BundleBuilder::default();
            for &i in order {
                b.add(files[i].0, files[i].1);
            }
            b.finish()
        };
        let one = build(&[0, 1, 2]);
        assert_eq!(one, build(&[2, 0, 1]));
        let entries = read_bundle(&one).unwrap();
        let names: Vec<_> = entries.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(names, ["a.txt", "b.txt", "dir/c.json"]);
        assert_eq!(entries[1].1, b"bee");
    }
}
