//! Flat, UUID-keyed object namespaces with a staging area and per-collection ACLs.
//!
//! On disk, a collection `cid` lives under `collections/{cid}/`:
//!
//! ```text
//! collection.json     record + ACL
//! staging/{key}       objects awaiting commit
//! objects/{key}       persistent objects
//! meta/{key}.json     checksum and size of each object (staged or persistent)
//! tmp/                partial writes, renamed into place when complete
//! ```
//!
//! Keys are fresh UUIDs, so user file names never appear in the namespace.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::auth::Permission;
use crate::checksum::{Checksum, HashingWriter};
use crate::error::{AeroError, Result};
use crate::ids::{CollectionId, PrincipalId, StorageKey};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collection {
    pub collection_id: CollectionId,
    pub owner: PrincipalId,
    pub root_path: PathBuf,
    pub acl: BTreeMap<PrincipalId, BTreeSet<Permission>>,
    pub base_url: String,
    pub created_at: DateTime<Utc>,
}

impl Collection {
    pub fn allows(&self, principal: PrincipalId, perm: Permission) -> bool {
        crate::auth::is_allowed(principal, self.owner, perm, self.acl.get(&principal))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub key: StorageKey,
    pub checksum: Checksum,
    pub size_bytes: u64,
}

/// An object written to staging, with its digest computed during the write.
pub type StagedObject = ObjectMeta;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FsckProblem {
    ChecksumMismatch {
        key: StorageKey,
        recorded: Checksum,
        actual: Checksum,
    },
    MissingMeta(StorageKey),
    StrayEntry(String),
}

pub struct CollectionStore {
    root: PathBuf,
    base_url: RwLock<String>,
    collections: RwLock<BTreeMap<CollectionId, Collection>>,
}

impl CollectionStore {
    /// Opens (or creates) the store rooted at `root`, loading existing collections.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut collections = BTreeMap::new();
        for entry in fs::read_dir(&root)? {
            let path = entry?.path().join("collection.json");
            if path.exists() {
                let c: Collection = serde_json::from_slice(&fs::read(&path)?)
                    .map_err(|e| AeroError::Persist(format!("{}: {e}", path.display())))?;
                collections.insert(c.collection_id, c);
            }
        }
        Ok(Self {
            root,
            base_url: RwLock::new(String::new()),
            collections: RwLock::new(collections),
        })
    }

    /// Sets the URL at which the collection server is reachable, e.g. `http://127.0.0.1:8081`.
    pub fn set_base_url(&self, url: &str) -> Result<()> {
        let url = url.trim_end_matches('/').to_owned();
        *self.base_url.write() = url.clone();
        let mut cols = self.collections.write();
        for c in cols.values_mut() {
            if c.base_url != url {
                c.base_url = url.clone();
                self.save(c)?;
            }
        }
        Ok(())
    }

    pub fn base_url(&self) -> String {
        self.base_url.read().clone()
    }

    pub fn create(&self, owner: PrincipalId) -> Result<Collection> {
        let collection_id = CollectionId::new();
        let root_path = self.root.join(collection_id.to_string());
        for sub in ["staging", "objects", "meta", "tmp"] {
            fs::create_dir_all(root_path.join(sub))?;
        }
        let c = Collection {
            collection_id,
            owner,
            root_path,
            acl: BTreeMap::from([(
                owner,
                BTreeSet::from([Permission::Read, Permission::Write, Permission::Admin]),
            )]),
            base_url: self.base_url(),
            created_at: Utc::now(),
        };
        self.save(&c)?;
        self.collections.write().insert(collection_id, c.clone());
        Ok(c)
    }

    pub fn get(&self, cid: CollectionId) -> Result<Collection> {
        self.collections
            .read()
            .get(&cid)
            .cloned()
            .ok_or(AeroError::UnknownCollection(cid))
    }

    pub fn ids(&self) -> Vec<CollectionId> {
        self.collections.read().keys().copied().collect()
    }

    pub fn check(&self, cid: CollectionId, principal: PrincipalId, perm: Permission) -> Result<()> {
        let c = self.get(cid)?;
        if c.allows(principal, perm) {
            Ok(())
        } else {
            Err(AeroError::Forbidden(format!(
                "{perm:?} on collection {cid} not granted"
            )))
        }
    }

    pub fn grant(
        &self,
        cid: CollectionId,
        caller: PrincipalId,
        principal: PrincipalId,
        perms: &BTreeSet<Permission>,
    ) -> Result<()> {
        self.update_acl(cid, caller, |acl| {
            acl.entry(principal).or_default().extend(perms.iter().copied());
        })
    }

    pub fn revoke(
        &self,
        cid: CollectionId,
        caller: PrincipalId,
        principal: PrincipalId,
        perms: &BTreeSet<Permission>,
    ) -> Result<()> {
        self.update_acl(cid, caller, |acl| {
            if let Some(set) = acl.get_mut(&principal) {
                set.retain(|p| !perms.contains(p));
                if set.is_empty() {
                    acl.remove(&principal);
                }
            }
        })
    }

    fn update_acl(
        &self,
        cid: CollectionId,
        caller: PrincipalId,
        f: impl FnOnce(&mut BTreeMap<PrincipalId, BTreeSet<Permission>>),
    ) -> Result<()> {
        let mut cols = self.collections.write();
        let c = cols.get_mut(&cid).ok_or(AeroError::UnknownCollection(cid))?;
        if !c.allows(caller, Permission::Admin) {
            return Err(AeroError::Forbidden(format!("admin on collection {cid} not granted")));
        }
        let mut updated = c.clone();
        f(&mut updated.acl);
        // The owner keeps admin no matter what.
        updated
            .acl
            .entry(updated.owner)
            .or_default()
            .insert(Permission::Admin);
        self.save(&updated)?;
        *c = updated;
        Ok(())
    }

    fn save(&self, c: &Collection) -> Result<()> {
        let path = c.root_path.join("collection.json");
        let tmp = c.root_path.join("tmp").join("collection.json.part");
        fs::write(&tmp, serde_json::to_vec_pretty(c).expect("collection serializes"))?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    fn dir(&self, cid: CollectionId) -> Result<PathBuf> {
        Ok(self.get(cid)?.root_path)
    }

    /// Opens a writer for a new staged object. Requires write permission.
    pub fn staging_writer(&self, cid: CollectionId, principal: PrincipalId) -> Result<StagingWriter> {
        self.check(cid, principal, Permission::Write)?;
        let dir = self.dir(cid)?;
        let key = StorageKey::new();
        let part = dir.join("tmp").join(format!("{key}.part"));
        let file = File::create(&part).map_err(AeroError::io_transient)?;
        Ok(StagingWriter {
            dir,
            key,
            part,
            inner: Some(HashingWriter::new(BufWriter::with_capacity(1 << 20, file))),
        })
    }

    /// Streams `reader` into staging.
    pub fn put_staged(
        &self,
        cid: CollectionId,
        principal: PrincipalId,
        mut reader: impl Read,
    ) -> Result<StagedObject> {
        let mut w = self.staging_writer(cid, principal)?;
        io::copy(&mut reader, &mut w).map_err(AeroError::io_transient)?;
        w.finish()
    }

    /// Moves an existing local file into staging (renaming when possible), digesting it.
    pub fn stage_file(
        &self,
        cid: CollectionId,
        principal: PrincipalId,
        path: &Path,
    ) -> Result<StagedObject> {
        self.check(cid, principal, Permission::Write)?;
        let dir = self.dir(cid)?;
        let key = StorageKey::new();
        let part = dir.join("tmp").join(format!("{key}.part"));
        if fs::rename(path, &part).is_err() {
            fs::copy(path, &part).map_err(AeroError::io_transient)?;
        }
        let (checksum, size_bytes) =
            Checksum::of_reader(File::open(&part)?).map_err(AeroError::io_transient)?;
        let meta = ObjectMeta {
            key,
            checksum,
            size_bytes,
        };
        write_meta(&dir, &meta)?;
        fs::rename(&part, dir.join("staging").join(key.to_string()))?;
        Ok(meta)
    }

    /// Moves a staged object into the persistent namespace under a fresh key.
    pub fn promote(&self, cid: CollectionId, staged: StorageKey) -> Result<StorageKey> {
        let dir = self.dir(cid)?;
        let from = dir.join("staging").join(staged.to_string());
        let mut meta = read_meta(&dir, staged).map_err(|_| unknown_key(staged))?;
        let key = StorageKey::new();
        meta.key = key;
        write_meta(&dir, &meta)?;
        if let Err(e) = fs::rename(&from, dir.join("objects").join(key.to_string())) {
            let _ = fs::remove_file(meta_path(&dir, key));
            return Err(if e.kind() == io::ErrorKind::NotFound {
                unknown_key(staged)
            } else {
                AeroError::io_transient(e)
            });
        }
        let _ = fs::remove_file(meta_path(&dir, staged));
        Ok(key)
    }

    pub fn discard_staged(&self, cid: CollectionId, staged: StorageKey) -> Result<()> {
        let dir = self.dir(cid)?;
        fs::remove_file(dir.join("staging").join(staged.to_string()))
            .map_err(|_| unknown_key(staged))?;
        let _ = fs::remove_file(meta_path(&dir, staged));
        Ok(())
    }

    pub fn staged_path(&self, cid: CollectionId, staged: StorageKey) -> Result<PathBuf> {
        let p = self.dir(cid)?.join("staging").join(staged.to_string());
        if p.is_file() {
            Ok(p)
        } else {
            Err(unknown_key(staged))
        }
    }

    /// Digest and size recorded when the object was staged.
    pub fn staged_meta(&self, cid: CollectionId, staged: StorageKey) -> Result<StagedObject> {
        self.staged_path(cid, staged)?;
        read_meta(&self.dir(cid)?, staged)
    }

    /// Filesystem path of a persistent object. No permission check: server-internal use.
    pub fn object_path(&self, cid: CollectionId, key: StorageKey) -> Result<PathBuf> {
        let p = self.dir(cid)?.join("objects").join(key.to_string());
        if p.is_file() {
            Ok(p)
        } else {
            Err(unknown_key(key))
        }
    }

    pub fn head(&self, cid: CollectionId, key: StorageKey, principal: PrincipalId) -> Result<ObjectMeta> {
        self.check(cid, principal, Permission::Read)?;
        let dir = self.dir(cid)?;
        if !dir.join("objects").join(key.to_string()).is_file() {
            return Err(unknown_key(key));
        }
        read_meta(&dir, key)
    }

    /// Opens a persistent object for reading. Requires read permission.
    pub fn get_object(
        &self,
        cid: CollectionId,
        key: StorageKey,
        principal: PrincipalId,
    ) -> Result<(File, ObjectMeta)> {
        let meta = self.head(cid, key, principal)?;
        let file = File::open(self.object_path(cid, key)?)?;
        Ok((file, meta))
    }

    /// Persistent object keys, sorted.
    pub fn list(&self, cid: CollectionId) -> Result<Vec<String>> {
        let mut keys: Vec<String> = fs::read_dir(self.dir(cid)?.join("objects"))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        keys.sort();
        Ok(keys)
    }

    /// Recomputes every persistent object's digest and compares it with the recorded one.
    pub fn fsck(&self, cid: CollectionId) -> Result<Vec<FsckProblem>> {
        let dir = self.dir(cid)?;
        let mut problems = Vec::new();
        for name in self.list(cid)? {
            let Ok(key) = name.parse::<StorageKey>() else {
                problems.push(FsckProblem::StrayEntry(name));
                continue;
            };
            let Ok(meta) = read_meta(&dir, key) else {
                problems.push(FsckProblem::MissingMeta(key));
                continue;
            };
            let (actual, _) = Checksum::of_reader(File::open(dir.join("objects").join(&name))?)?;
            if actual != meta.checksum {
                problems.push(FsckProblem::ChecksumMismatch {
                    key,
                    recorded: meta.checksum,
                    actual,
                });
            }
        }
        Ok(problems)
    }

    /// Deletes staged objects (and abandoned partial writes) older than `ttl`.
    pub fn gc_staging(&self, ttl: Duration) -> Result<usize> {
        let cutoff = SystemTime::now() - ttl;
        let mut removed = 0;
        for cid in self.ids() {
            let dir = self.dir(cid)?;
            for sub in ["staging", "tmp"] {
                for entry in fs::read_dir(dir.join(sub))?.filter_map(|e| e.ok()) {
                    let old = entry
                        .metadata()
                        .and_then(|m| m.modified())
                        .is_ok_and(|t| t < cutoff);
                    let name = entry.file_name().to_string_lossy().into_owned();
                    if old && name != "collection.json.part" && fs::remove_file(entry.path()).is_ok() {
                        if let Ok(key) = name.parse::<StorageKey>() {
                            let _ = fs::remove_file(meta_path(&dir, key));
                        }
                        removed += 1;
                    }
                }
            }
        }
        Ok(removed)
    }

    /// URL of an object on the collection server.
    pub fn download_url(&self, cid: CollectionId, key: StorageKey) -> Result<String> {
        let c = self.get(cid)?;
        Ok(format!("{}/collections/{cid}/objects/{key}", c.base_url))
    }
}

/// Writes a staged object; the digest is computed as bytes stream through.
pub struct StagingWriter {
    dir: PathBuf,
    key: StorageKey,
    part: PathBuf,
    inner: Option<HashingWriter<BufWriter<File>>>,
}

impl StagingWriter {
    pub fn written(&self) -> u64 {
        self.inner.as_ref().map_or(0, |w| w.written())
    }

    pub fn finish(mut self) -> Result<StagedObject> {
        let w = self.inner.take().expect("finish called once");
        let (mut buf, checksum, size_bytes) = w.finish();
        buf.flush().map_err(AeroError::io_transient)?;
        drop(buf);
        let meta = ObjectMeta {
            key: self.key,
            checksum,
            size_bytes,
        };
        write_meta(&self.dir, &meta)?;
        fs::rename(&self.part, self.dir.join("staging").join(self.key.to_string()))?;
        Ok(meta)
    }
}

impl Write for StagingWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.inner.as_mut().expect("writer open").write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.as_mut().expect("writer open").flush()
    }
}

impl Drop for StagingWriter {
    fn drop(&mut self) {
        if self.inner.is_some() {
            let _ = fs::remove_file(&self.part);
        }
    }
}

fn meta_path(dir: &Path, key: StorageKey) -> PathBuf {
    dir.join("meta").join(format!("{key}.json"))
}

fn write_meta(dir: &Path, meta: &ObjectMeta) -> Result<()> {
    let tmp = dir.join("tmp").join(format!("{}.json.part", meta.key));
    fs::write(&tmp, serde_json::to_vec(meta).expect("meta serializes"))
        .map_err(AeroError::io_transient)?;
    fs::rename(tmp, meta_path(dir, meta.key))?;
    Ok(())
}

fn read_meta(dir: &Path, key: StorageKey) -> Result<ObjectMeta> {
    let bytes = fs::read(meta_path(dir, key)).map_err(|_| unknown_key(key))?;
    serde_json::from_slice(&bytes).map_err(|e| AeroError::Persist(e.to_string()))
}

fn unknown_key(key: StorageKey) -> AeroError {
    AeroError::UnknownKey(key.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, CollectionStore, Collection) {
        let dir = tempfile::tempdir().unwrap();
        let s = CollectionStore::open(dir.path().join("collections")).unwrap();
        s.set_base_url("http://127.0.0.1:9").unwrap();
        let c = s.create(PrincipalId::new()).unwrap();
        (dir, s, c)
    }

    fn read_all(mut f: File) -> Vec<u8> {
        let mut v = Vec::new();
        f.read_to_end(&mut v).unwrap();
        v
    }

    #[test]
    fn empty_object_has_empty_digest() {
        let (_d, s, c) = store();
        let staged = s.put_staged(c.collection_id, c.owner, io::empty()).unwrap();
        assert_eq!(staged.size_bytes, 0);
        assert_eq!(staged.checksum.as_str(), Checksum::EMPTY_HEX);
    }

    #[test]
    fn put_promote_get_round_trip() {
        let (_d, s, c) = store();
        let data = b"wastewater concentration series".to_vec();
        let staged = s.put_staged(c.collection_id, c.owner, &data[..]).unwrap();
        assert_eq!(staged.checksum, Checksum::of_bytes(&data));
        let key = s.promote(c.collection_id, staged.key).unwrap();
        assert_ne!(key, staged.key);
        let (f, meta) = s.get_object(c.collection_id, key, c.owner).unwrap();
        assert_eq!(read_all(f), data);
        assert_eq!(meta.checksum, staged.checksum);
        // The staged key is gone.
        assert!(matches!(
            s.staged_path(c.collection_id, staged.key),
            Err(AeroError::UnknownKey(_))
        ));
        assert!(matches!(
            s.get_object(c.collection_id, staged.key, c.owner),
            Err(AeroError::UnknownKey(_))
        ));
        assert!(matches!(
            s.promote(c.collection_id, staged.key),
            Err(AeroError::UnknownKey(_))
        ));
    }

    #[test]
    fn write_requires_permission() {
        let (_d, s, c) = store();
        let stranger = PrincipalId::new();
        assert!(matches!(
            s.put_staged(c.collection_id, stranger, &b"x"[..]),
            Err(AeroError::Forbidden(_))
        ));
    }

    #[test]
    fn grant_and_revoke_read() {
        let (_d, s, c) = store();
        let reader = PrincipalId::new();
        let staged = s.put_staged(c.collection_id, c.owner, &b"abc"[..]).unwrap();
        let key = s.promote(c.collection_id, staged.key).unwrap();
        assert!(matches!(
            s.get_object(c.collection_id, key, reader),
            Err(AeroError::Forbidden(_))
        ));
        let read = BTreeSet::from([Permission::Read]);
        // Non-admins cannot grant.
        assert!(matches!(
            s.grant(c.collection_id, reader, reader, &read),
            Err(AeroError::Forbidden(_))
        ));
        s.grant(c.collection_id, c.owner, reader, &read).unwrap();
        assert!(s.get_object(c.collection_id, key, reader).is_ok());
        s.revoke(c.collection_id, c.owner, reader, &read).unwrap();
        assert!(matches!(
            s.get_object(c.collection_id, key, reader),
            Err(AeroError::Forbidden(_))
        ));
    }

    #[test]
    fn owner_cannot_lose_admin() {
        let (_d, s, c) = store();
        s.revoke(c.collection_id, c.owner, c.owner, &BTreeSet::from([Permission::Admin]))
            .unwrap();
        assert!(s.get(c.collection_id).unwrap().acl[&c.owner].contains(&Permission::Admin));
    }

    #[test]
    fn namespace_is_flat_uuid_keys() {
        let (d, s, c) = store();
        let src = d.path().join("my_original_name.csv");
        fs::write(&src, b"1,2,3").unwrap();
        let staged = s.stage_file(c.collection_id, c.owner, &src).unwrap();
        s.promote(c.collection_id, staged.key).unwrap();
        let staged = s.put_staged(c.collection_id, c.owner, &b"x"[..]).unwrap();
        s.promote(c.collection_id, staged.key).unwrap();
        let keys = s.list(c.collection_id).unwrap();
        assert_eq!(keys.len(), 2);
        for k in keys {
            assert!(k.parse::<StorageKey>().is_ok(), "{k}");
            assert!(!k.contains("original"));
        }
    }

    #[test]
    fn fsck_detects_tampering() {
        let (_d, s, c) = store();
        let staged = s.put_staged(c.collection_id, c.owner, &b"abc"[..]).unwrap();
        let key = s.promote(c.collection_id, staged.key).unwrap();
        assert!(s.fsck(c.collection_id).unwrap().is_empty());
        fs::write(s.object_path(c.collection_id, key).unwrap(), b"abd").unwrap();
        let problems = s.fsck(c.collection_id).unwrap();
        assert!(matches!(problems[..], [FsckProblem::ChecksumMismatch { .. }]));
    }

    #[test]
    fn gc_removes_old_staged_objects() {
        let (_d, s, c) = store();
        let staged = s.put_staged(c.collection_id, c.owner, &b"abc"[..]).unwrap();
        assert_eq!(s.gc_staging(Duration::from_secs(3600)).unwrap(), 0);
        assert_eq!(s.gc_staging(Duration::ZERO).unwrap(), 1);
        assert!(s.staged_path(c.collection_id, staged.key).is_err());
    }

    #[test]
    fn reopen_keeps_collections_and_urls() {
        let (d, s, c) = store();
        drop(s);
        let s = CollectionStore::open(d.path().join("collections")).unwrap();
        assert_eq!(s.get(c.collection_id).unwrap(), c);
        let key = StorageKey::new();
        assert_eq!(
            s.download_url(c.collection_id, key).unwrap(),
            format!("http://127.0.0.1:9/collections/{}/objects/{key}", c.collection_id)
        );
    }

    #[test]
    fn dropped_writer_leaves_nothing_behind() {
        let (_d, s, c) = store();
        let mut w = s.staging_writer(c.collection_id, c.owner).unwrap();
        w.write_all(b"partial").unwrap();
        drop(w);
        assert!(fs::read_dir(c.root_path.join("tmp")).unwrap().all(|e| {
            e.unwrap().file_name() == "collection.json.part"
        }));
        assert_eq!(fs::read_dir(c.root_path.join("staging")).unwrap().count(), 0);
    }
}
