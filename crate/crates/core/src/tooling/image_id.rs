use std::fmt;
use std::io::Read;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha384};

use super::ToolingError;
use crate::attestation::{PcrSet, PCR_LEN};

pub const IGNORE_FILE: &str = ".enclavedignore";
const ALWAYS_IGNORED: &str = ".git";

/// SHA-384 over the canonical encoding of a source tree.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageId([u8; PCR_LEN]);

impl ImageId {
    pub fn digest(&self) -> &[u8; PCR_LEN] {
        &self.0
    }

    /// PCR0 is the digest itself; PCR1 and PCR2 hash it with a 0x01 / 0x02
    /// suffix so every register depends on the tree.
    pub fn pcrs(&self) -> PcrSet {
        let derive = |tag: u8| -> [u8; PCR_LEN] {
            let mut h = Sha384::new();
            h.update(self.0);
            h.update([tag]);
            h.finalize().into()
        };
        PcrSet::new(self.0, derive(1), derive(2))
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageId({self})")
    }
}

struct IgnoreRules(Vec<glob::Pattern>);

impl IgnoreRules {
    fn load(root: &Path) -> Result<Self, ToolingError> {
        let path = root.join(IGNORE_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(ToolingError::unreadable(&path, e)),
        };
        let mut patterns = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let p = glob::Pattern::new(line.trim_end_matches('/'))
                .map_err(|e| ToolingError::InvalidIgnore(format!("{line:?}: {e}")))?;
            patterns.push(p);
        }
        Ok(Self(patterns))
    }

    /// Patterns without a slash match any single path component, others
    /// match the whole relative path.
    fn ignores(&self, rel: &str, name: &str) -> bool {
        name == ALWAYS_IGNORED
            || self.0.iter().any(|p| {
                if p.as_str().contains('/') {
                    p.matches(rel)
                } else {
                    p.matches(name)
                }
            })
    }
}

struct Entry {
    rel: Vec<u8>,
    abs: PathBuf,
}

fn collect(root: &Path, rules: &IgnoreRules) -> Result<Vec<Entry>, ToolingError> {
    let mut out = Vec::new();
    let walker = walkdir::WalkDir::new(root).follow_links(false).min_depth(1);
    let mut it = walker.into_iter();
    while let Some(entry) = it.next() {
        let entry = entry.map_err(|e| {
            let path = e
                .path()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| root.to_path_buf());
            ToolingError::unreadable(&path, e.into())
        })?;
        let rel_path = entry
            .path()
            .strip_prefix(root)
            .expect("walkdir yields children of root");
        let rel = rel_path.to_string_lossy().replace('\\', "/");
        let name = entry.file_name().to_string_lossy();
        if rules.ignores(&rel, &name) {
            if entry.file_type().is_dir() {
                it.skip_current_dir();
            }
            continue;
        }
        if entry.file_type().is_dir() {
            continue;
        }
        out.push(Entry {
            rel: rel_path.as_os_str().as_bytes().to_vec(),
            abs: entry.into_path(),
        });
    }
    out.sort_by(|a, b| a.rel.cmp(&b.rel));
    Ok(out)
}

/// Digest of the tree at `root`: files in byte order of their relative
/// paths, each contributing its path, execute bit and content. Timestamps,
/// owners and other mode bits do not take part; symlinks contribute their
/// target string.
pub fn compute_image_id(root: impl AsRef<Path>) -> Result<ImageId, ToolingError> {
    let root = root.as_ref();
    let meta = std::fs::metadata(root).map_err(|e| ToolingError::unreadable(root, e))?;
    if !meta.is_dir() {
        return Err(ToolingError::UnreadableTree {
            path: root.to_path_buf(),
            reason: "not a directory".into(),
        });
    }
    let rules = IgnoreRules::load(root)?;
    let mut h = Sha384::new();
    let mut buf = Vec::new();
    for e in collect(root, &rules)? {
        let meta = std::fs::symlink_metadata(&e.abs)
            .map_err(|err| ToolingError::unreadable(&e.abs, err))?;
        buf.clear();
        let (kind, exec) = if meta.file_type().is_symlink() {
            let target =
                std::fs::read_link(&e.abs).map_err(|err| ToolingError::unreadable(&e.abs, err))?;
            buf.extend_from_slice(target.as_os_str().as_bytes());
            (b'l', 0u8)
        } else {
            std::fs::File::open(&e.abs)
                .and_then(|mut f| f.read_to_end(&mut buf))
                .map_err(|err| ToolingError::unreadable(&e.abs, err))?;
            (b'f', u8::from(meta.permissions().mode() & 0o111 != 0))
        };
        h.update([kind]);
        h.update((e.rel.len() as u64).to_be_bytes());
        h.update(&e.rel);
        h.update([exec]);
        h.update((buf.len() as u64).to_be_bytes());
        h.update(&buf);
    }
    Ok(ImageId(h.finalize().into()))
}
