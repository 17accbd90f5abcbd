//! File-backed store of compressed user states.
//!
//! Layout: `manifest.json` plus `users/<id>.bin`, one little-endian record
//! per user. Reads go through an in-memory cache behind a read-write lock so
//! concurrent scorers share decoded states.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{compress_user, CompressedUserState};
use crate::data::BehaviorSequence;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::Checkpoint;
use crate::par::Execution;

const MAGIC: &[u8; 4] = b"LUS1";
const MANIFEST: &str = "manifest.json";
const USERS: &str = "users";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub params_version: String,
    pub d: usize,
    pub r: usize,
    pub user_count: usize,
}

#[derive(Debug)]
pub struct StateStore {
    root: PathBuf,
    manifest: Manifest,
    cache: RwLock<HashMap<u64, Arc<CompressedUserState>>>,
}

fn encode(s: &CompressedUserState) -> Vec<u8> {
    let (d, r) = s.e_comp.shape();
    let v = s.params_version.as_bytes();
    let mut out = Vec::with_capacity(32 + v.len() + 4 * s.short_ids.len() + 16 * d * r);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&s.user_id.to_le_bytes());
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    out.extend_from_slice(v);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(r as u32).to_le_bytes());
    out.extend_from_slice(&(s.short_ids.len() as u32).to_le_bytes());
    for id in &s.short_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for x in s.e_comp.data().iter().chain(s.e_auxabsorb.data()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.at))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn decode(buf: &[u8]) -> std::result::Result<CompressedUserState, String> {
    let mut r = Reader { buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let user_id = r.u64()?;
    let vlen = r.u32()? as usize;
    let params_version = String::from_utf8(r.take(vlen)?.to_vec()).map_err(|e| e.to_string())?;
    let d = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let n_short = r.u32()? as usize;
    let short_ids = (0..n_short)
        .map(|_| r.u32())
        .collect::<std::result::Result<_, _>>()?;
    let e_comp = Matrix::new(d, rank, r.f64s(d * rank)?).map_err(|e| e.to_string())?;
    let e_auxabsorb = Matrix::new(d, rank, r.f64s(d * rank)?).map_err(|e| e.to_string())?;
    if r.at != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.at));
    }
    Ok(CompressedUserState {
        user_id,
        e_comp,
        e_auxabsorb,
        short_ids,
        params_version,
    })
}

fn user_path(root: &Path, user_id: u64) -> PathBuf {
    root.join(USERS).join(format!("{user_id}.bin"))
}

/// Builds (or rebuilds) the store at `root` for `checkpoint`. Any previous
/// contents are replaced, so running twice yields identical bytes.
pub fn precompute(
    root: impl AsRef<Path>,
    checkpoint: &Checkpoint,
    users: &BTreeMap<u64, Arc<BehaviorSequence>>,
    exec: Execution,
) -> Result<StateStore> {
    let root = root.as_ref();
    let model = checkpoint.inference::<f64>();
    let entries: Vec<(&u64, &Arc<BehaviorSequence>)> = users.iter().collect();
    let states = exec.try_map(&entries, |(id, seq)| compress_user(**id, seq, &model))?;

    let users_dir = root.join(USERS);
    if users_dir.exists() {
        fs::remove_dir_all(&users_dir).map_err(|e| Error::io(&users_dir, e))?;
    }
    fs::create_dir_all(&users_dir).map_err(|e| Error::io(&users_dir, e))?;
    for s in &states {
        let path = user_path(root, s.user_id);
        fs::write(&path, encode(s)).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest {
        params_version: checkpoint.version().to_string(),
        d: checkpoint.config().dim,
        r: checkpoint.config().rank,
        user_count: states.len(),
    };
    let mpath = root.join(MANIFEST);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;

    let cache = states
        .into_iter()
        .map(|s| (s.user_id, Arc::new(s)))
        .collect();
    Ok(StateStore {
        root: root.to_path_buf(),
        manifest,
        cache: RwLock::new(cache),
    })
}

impl StateStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mpath = root.join(MANIFEST);
        let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// The cached state of `user_id`, read from disk on first access.
    pub fn get(&self, user_id: u64) -> Result<Arc<CompressedUserState>> {
        if let Some(s) = self.cache.read().expect("cache lock").get(&user_id) {
            return Ok(Arc::clone(s));
        }
        let path = user_path(&self.root, user_id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::CacheMiss(user_id))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let corrupt = |msg: String| Error::Corrupt {
            path: path.clone(),
            msg,
        };
        let state = decode(&bytes).map_err(corrupt)?;
        if state.user_id != user_id {
            return Err(corrupt(format!("record holds user {}", state.user_id)));
        }
        if state.e_comp.shape() != (self.manifest.d, self.manifest.r) {
            return Err(corrupt(format!("state shape {:?}", state.e_comp.shape())));
        }
        let state = Arc::new(state);
        self.cache
            .write()
            .expect("cache lock")
            .insert(user_id, Arc::clone(&state));
        Ok(state)
    }
}
