use std::collections::BTreeSet;

use chrono::Utc;
use url::Url;

use super::{AssetRow, Registry};
use crate::auth::{Permission, ResourceRef};
use crate::checksum::Checksum;
use crate::collection::CollectionStore;
use crate::error::{AeroError, Result};
use crate::ids::{AssetId, FunctionId, PrincipalId, RunId, StorageKey};
use crate::model::{
    CommitResult, DataAsset, DataVersion, NewAsset, ProvenanceRecord, ProvenanceTree, VersionRef,
    VersionSelector,
};
use crate::search::Visibility;

/// Staged content to be committed as the next version of an asset.
#[derive(Debug, Clone)]
pub struct CommitRequest {
    pub asset_id: AssetId,
    pub checksum: String,
    pub size_bytes: u64,
    pub media_type: String,
    pub staged_key: StorageKey,
    /// Present for flow-produced (non-ingested) versions.
    pub provenance: Option<ProvenanceInput>,
}

#[derive(Debug, Clone)]
pub struct ProvenanceInput {
    pub run_id: RunId,
    pub function_ref: FunctionId,
    pub inputs: Vec<VersionRef>,
}

pub(super) fn check_source_url(url: &str) -> Result<()> {
    match Url::parse(url) {
        Ok(u) if matches!(u.scheme(), "http" | "https") && u.host().is_some() => Ok(()),
        _ => Err(AeroError::InvalidUrl(url.to_owned())),
    }
}

pub(super) fn new_asset_row(owner: PrincipalId, spec: &NewAsset) -> Result<AssetRow> {
    if spec.name.trim().is_empty() {
        return Err(AeroError::InvalidRequest("asset name must not be empty".into()));
    }
    if let Some(url) = &spec.source_url {
        check_source_url(url)?;
    }
    Ok(AssetRow {
        asset: DataAsset {
            asset_id: AssetId::new(),
            name: spec.name.clone(),
            description: spec.description.clone(),
            tags: spec.tags.clone(),
            collection_ref: spec.collection_ref,
            source_url: spec.source_url.clone(),
            owner,
            public: spec.public,
            created_at: Utc::now(),
            last_polled_at: None,
            deleted: false,
        },
        versions: Vec::new(),
    })
}

impl super::State {
    pub(super) fn insert_asset(&mut self, row: AssetRow) -> Result<DataAsset> {
        let key = (row.asset.owner, row.asset.name.clone());
        if self.derived.names.contains_key(&key) {
            return Err(AeroError::DuplicateName {
                name: row.asset.name.clone(),
            });
        }
        let asset = row.asset.clone();
        self.derived.names.insert(key, asset.asset_id);
        self.assets.insert(asset.asset_id, row);
        Ok(asset)
    }

    fn version_of(&self, asset: AssetId, selector: VersionSelector) -> Result<&DataVersion> {
        let row = self.live_asset(asset)?;
        match selector {
            VersionSelector::Latest => row.versions.last().ok_or(AeroError::UnknownVersion {
                asset,
                version: 0,
            }),
            VersionSelector::Pinned(n) => row
                .versions
                .get((n as usize).wrapping_sub(1))
                .ok_or(AeroError::UnknownVersion { asset, version: n }),
        }
    }

    fn any_version(&self, v: VersionRef) -> Result<&DataVersion> {
        self.assets
            .get(&v.asset_id)
            .ok_or(AeroError::UnknownAsset(v.asset_id))?
            .versions
            .get((v.version as usize).wrapping_sub(1))
            .ok_or(AeroError::UnknownVersion {
                asset: v.asset_id,
                version: v.version,
            })
    }
}

impl Registry {
    /// Creates an asset with no versions. Names are unique per owner among live assets.
    pub fn create_asset(&self, owner: PrincipalId, spec: &NewAsset) -> Result<DataAsset> {
        let row = new_asset_row(owner, spec)?;
        self.transact(|st| st.insert_asset(row))
    }

    pub fn asset(&self, id: AssetId) -> Result<DataAsset> {
        self.read(|st| st.live_asset(id).map(|r| r.asset.clone()))
    }

    pub fn assets(&self) -> Vec<DataAsset> {
        self.read(|st| {
            st.assets
                .values()
                .filter(|r| !r.asset.deleted)
                .map(|r| r.asset.clone())
                .collect()
        })
    }

    /// Tombstones an asset. Its versions stay resolvable for provenance.
    pub fn delete_asset(&self, id: AssetId) -> Result<()> {
        self.transact(|st| {
            let row = st.live_asset(id)?;
            let key = (row.asset.owner, row.asset.name.clone());
            st.derived.names.remove(&key);
            st.assets.get_mut(&id).expect("checked").asset.deleted = true;
            Ok(())
        })
    }

    /// Commits staged content as the next version unless it equals the latest version.
    ///
    /// New content is promoted into the collection's persistent namespace; unchanged
    /// content is discarded from staging. Either way the asset's `last_polled_at` is
    /// refreshed.
    pub fn commit_version(
        &self,
        store: &CollectionStore,
        req: &CommitRequest,
    ) -> Result<(CommitResult, Option<DataVersion>)> {
        self.transact(|st| {
            let row = st.live_asset(req.asset_id)?;
            let checksum = Checksum::parse(&req.checksum)?;
            let cid = row.asset.collection_ref;
            let staged = store.staged_meta(cid, req.staged_key)?;
            if staged.checksum != checksum || staged.size_bytes != req.size_bytes {
                return Err(AeroError::InvalidRequest(
                    "checksum or size does not match the staged object".into(),
                ));
            }
            if let Some(p) = &req.provenance {
                for input in &p.inputs {
                    st.any_version(*input)?;
                }
            }
            let now = Utc::now();
            let unchanged = row.versions.last().is_some_and(|v| v.checksum == checksum);
            if unchanged {
                store.discard_staged(cid, req.staged_key)?;
                st.assets.get_mut(&req.asset_id).expect("checked").asset.last_polled_at = Some(now);
                return Ok((CommitResult::Unchanged, None));
            }
            let storage_key = store.promote(cid, req.staged_key)?;
            let row = st.assets.get_mut(&req.asset_id).expect("checked");
            let version = row.versions.len() as u64 + 1;
            let dv = DataVersion {
                asset_id: req.asset_id,
                version,
                checksum,
                size_bytes: req.size_bytes,
                media_type: req.media_type.clone(),
                storage_key,
                created_at: now,
                provenance: req.provenance.as_ref().map(|p| ProvenanceRecord {
                    output: VersionRef::new(req.asset_id, version),
                    run_id: p.run_id,
                    function_ref: p.function_ref,
                    inputs: p.inputs.clone(),
                    recorded_at: now,
                }),
            };
            row.versions.push(dv.clone());
            row.asset.last_polled_at = Some(now);
            Ok((CommitResult::NewVersion(version), Some(dv)))
        })
    }

    /// Records that a flow checked the asset's source without committing anything.
    pub fn touch_polled(&self, id: AssetId) -> Result<()> {
        self.transact(|st| {
            st.live_asset(id)?;
            st.assets.get_mut(&id).expect("checked").asset.last_polled_at = Some(Utc::now());
            Ok(())
        })
    }

    pub fn version(&self, asset: AssetId, selector: VersionSelector) -> Result<DataVersion> {
        self.read(|st| st.version_of(asset, selector).cloned())
    }

    pub fn versions(&self, asset: AssetId) -> Result<Vec<DataVersion>> {
        self.read(|st| st.live_asset(asset).map(|r| r.versions.clone()))
    }

    pub fn latest_checksum(&self, asset: AssetId) -> Result<Option<Checksum>> {
        self.read(|st| {
            st.live_asset(asset)
                .map(|r| r.versions.last().map(|v| v.checksum.clone()))
        })
    }

    /// Every committed version of every live asset.
    pub fn all_versions(&self) -> Vec<(DataAsset, DataVersion)> {
        self.read(|st| {
            st.assets
                .values()
                .filter(|r| !r.asset.deleted)
                .flat_map(|r| r.versions.iter().map(|v| (r.asset.clone(), v.clone())))
                .collect()
        })
    }

    pub fn provenance_record(&self, v: VersionRef) -> Result<Option<ProvenanceRecord>> {
        self.read(|st| st.any_version(v).map(|dv| dv.provenance.clone()))
    }

    /// The version and, recursively, its inputs down to `depth` levels (unbounded if `None`).
    pub fn provenance_of(
        &self,
        asset: AssetId,
        version: u64,
        depth: Option<usize>,
    ) -> Result<ProvenanceTree> {
        self.read(|st| {
            fn build(st: &super::State, v: VersionRef, depth: Option<usize>) -> Result<ProvenanceTree> {
                let dv = st.any_version(v)?;
                let mut node = ProvenanceTree {
                    asset_id: v.asset_id,
                    version: v.version,
                    run_id: dv.provenance.as_ref().map(|p| p.run_id),
                    function_ref: dv.provenance.as_ref().map(|p| p.function_ref),
                    children: Vec::new(),
                };
                if depth != Some(0) {
                    if let Some(p) = &dv.provenance {
                        for input in &p.inputs {
                            node.children
                                .push(build(st, *input, depth.map(|d| d - 1))?);
                        }
                    }
                }
                Ok(node)
            }
            st.live_asset(asset)?;
            build(st, VersionRef::new(asset, version), depth)
        })
    }

    /// Who may see the asset's search entries.
    pub fn visibility(&self, asset: AssetId) -> Result<Visibility> {
        self.read(|st| {
            let row = st.live_asset(asset)?;
            if row.asset.public {
                return Ok(Visibility::Public);
            }
            let mut who: BTreeSet<PrincipalId> = st
                .acl
                .iter()
                .filter(|e| {
                    e.resource == ResourceRef::Asset(asset)
                        && (e.perms.contains(&Permission::Read) || e.perms.contains(&Permission::Admin))
                })
                .map(|e| e.principal_id)
                .collect();
            who.insert(row.asset.owner);
            Ok(Visibility::Principals(who))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collection::Collection;

    struct Fixture {
        _dir: tempfile::TempDir,
        reg: Registry,
        store: CollectionStore,
        col: Collection,
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let store = CollectionStore::open(dir.path().join("collections")).unwrap();
        let col = store.create(PrincipalId::new()).unwrap();
        Fixture {
            _dir: dir,
            reg: Registry::in_memory(),
            store,
            col,
        }
    }

    impl Fixture {
        fn asset(&self, name: &str) -> DataAsset {
            self.reg
                .create_asset(
                    self.col.owner,
                    &NewAsset {
                        name: name.into(),
                        description: String::new(),
                        tags: BTreeSet::new(),
                        collection_ref: self.col.collection_id,
                        source_url: None,
                        public: false,
                    },
                )
                .unwrap()
        }

        fn commit(&self, asset: AssetId, data: &[u8], prov: Option<ProvenanceInput>) -> CommitResult {
            let staged = self
                .store
                .put_staged(self.col.collection_id, self.col.owner, data)
                .unwrap();
            self.reg
                .commit_version(
                    &self.store,
                    &CommitRequest {
                        asset_id: asset,
                        checksum: staged.checksum.to_string(),
                        size_bytes: staged.size_bytes,
                        media_type: "text/plain".into(),
                        staged_key: staged.key,
                        provenance: prov,
                    },
                )
                .unwrap()
                .0
        }
    }

    #[test]
    fn create_asset_rules() {
        let f = fixture();
        let spec = NewAsset {
            name: "ww_obrien".into(),
            description: "O'Brien wastewater".into(),
            tags: BTreeSet::from(["covid".to_string()]),
            collection_ref: f.col.collection_id,
            source_url: Some("https://example.org/obrien.csv".into()),
            public: false,
        };
        let a = f.reg.create_asset(f.col.owner, &spec).unwrap();
        assert!(f.reg.versions(a.asset_id).unwrap().is_empty());
        assert!(matches!(
            f.reg.create_asset(f.col.owner, &spec),
            Err(AeroError::DuplicateName { .. })
        ));
        // Another owner may reuse the name.
        assert!(f.reg.create_asset(PrincipalId::new(), &spec).is_ok());
        let ftp = NewAsset {
            name: "other".into(),
            source_url: Some("ftp://x".into()),
            ..spec.clone()
        };
        assert!(matches!(f.reg.create_asset(f.col.owner, &ftp), Err(AeroError::InvalidUrl(_))));
        let empty = NewAsset {
            name: " ".into(),
            ..spec
        };
        assert!(f.reg.create_asset(f.col.owner, &empty).is_err());
    }

    #[test]
    fn deleted_name_can_be_reused() {
        let f = fixture();
        let a = f.asset("x");
        f.reg.delete_asset(a.asset_id).unwrap();
        assert!(matches!(f.reg.asset(a.asset_id), Err(AeroError::UnknownAsset(_))));
        let b = f.asset("x");
        assert_ne!(a.asset_id, b.asset_id);
    }

    #[test]
    fn commit_dedups_against_latest() {
        let f = fixture();
        let a = f.asset("a").asset_id;
        assert_eq!(f.commit(a, b"h1", None), CommitResult::NewVersion(1));
        assert_eq!(f.commit(a, b"h1", None), CommitResult::Unchanged);
        assert_eq!(f.reg.versions(a).unwrap().len(), 1);
        assert_eq!(f.commit(a, b"h2", None), CommitResult::NewVersion(2));
        // Going back to older content is a change relative to the latest.
        assert_eq!(f.commit(a, b"h1", None), CommitResult::NewVersion(3));
        // Unchanged commits leave nothing in staging.
        assert_eq!(std::fs::read_dir(f.col.root_path.join("staging")).unwrap().count(), 0);
    }

    #[test]
    fn empty_content_commit_digest() {
        let f = fixture();
        let a = f.asset("empty").asset_id;
        f.commit(a, b"", None);
        let v = f.reg.version(a, VersionSelector::Latest).unwrap();
        assert_eq!(v.checksum.as_str(), Checksum::EMPTY_HEX);
        assert_eq!(v.size_bytes, 0);
    }

    #[test]
    fn commit_errors() {
        let f = fixture();
        let a = f.asset("a").asset_id;
        let staged = f.store.put_staged(f.col.collection_id, f.col.owner, &b"x"[..]).unwrap();
        let mut req = CommitRequest {
            asset_id: AssetId::new(),
            checksum: staged.checksum.to_string(),
            size_bytes: 1,
            media_type: "x".into(),
            staged_key: staged.key,
            provenance: None,
        };
        assert!(matches!(f.reg.commit_version(&f.store, &req), Err(AeroError::UnknownAsset(_))));
        req.asset_id = a;
        req.checksum = "zz".into();
        assert!(matches!(
            f.reg.commit_version(&f.store, &req),
            Err(AeroError::MalformedChecksum(_))
        ));
        req.checksum = Checksum::of_bytes(b"y").to_string();
        assert!(matches!(
            f.reg.commit_version(&f.store, &req),
            Err(AeroError::InvalidRequest(_))
        ));
        req.checksum = staged.checksum.to_string();
        req.staged_key = StorageKey::new();
        assert!(matches!(f.reg.commit_version(&f.store, &req), Err(AeroError::UnknownKey(_))));
    }

    #[test]
    fn version_selection() {
        let f = fixture();
        let a = f.asset("a").asset_id;
        for d in [b"1", b"2", b"3"] {
            f.commit(a, d, None);
        }
        assert_eq!(f.reg.version(a, VersionSelector::Latest).unwrap().version, 3);
        let v2 = f.reg.version(a, VersionSelector::Pinned(2)).unwrap();
        assert_eq!(v2.version, 2);
        assert_ne!(v2.storage_key, f.reg.version(a, VersionSelector::Pinned(3)).unwrap().storage_key);
        assert!(matches!(
            f.reg.version(a, VersionSelector::Pinned(9)),
            Err(AeroError::UnknownVersion { version: 9, .. })
        ));
        assert!(matches!(
            f.reg.version(a, VersionSelector::Pinned(0)),
            Err(AeroError::UnknownVersion { .. })
        ));
    }

    #[test]
    fn provenance_tree_shape() {
        let f = fixture();
        let (a, b, c) = (f.asset("A").asset_id, f.asset("B").asset_id, f.asset("C").asset_id);
        let func = FunctionId::new();
        f.commit(a, b"a1", None);
        f.commit(b, b"b1", None);
        let a1 = VersionRef::new(a, 1);
        let b_prov = ProvenanceInput {
            run_id: RunId::new(),
            function_ref: func,
            inputs: vec![a1],
        };
        assert_eq!(f.commit(b, b"b2", Some(b_prov)), CommitResult::NewVersion(2));
        let c_prov = ProvenanceInput {
            run_id: RunId::new(),
            function_ref: func,
            inputs: vec![a1, VersionRef::new(b, 2)],
        };
        f.commit(c, b"c1", Some(c_prov));

        // Ingested versions are leaves.
        assert_eq!(f.reg.provenance_of(a, 1, None).unwrap().node_count(), 1);

        let tree = f.reg.provenance_of(c, 1, None).unwrap();
        // Brute-force oracle: expand stored records with an explicit stack.
        let mut stack = vec![VersionRef::new(c, 1)];
        let mut visited = Vec::new();
        while let Some(v) = stack.pop() {
            visited.push(v);
            if let Some(rec) = f.reg.provenance_record(v).unwrap() {
                stack.extend(rec.inputs);
            }
        }
        assert_eq!(tree.node_count(), visited.len());
        assert_eq!(tree.node_count(), 4);
        assert_eq!(visited.iter().filter(|v| **v == a1).count(), 2);

        let shallow = f.reg.provenance_of(c, 1, Some(1)).unwrap();
        assert_eq!(shallow.node_count(), 3);
        assert!(shallow.children.iter().all(|ch| ch.children.is_empty()));
        assert!(matches!(
            f.reg.provenance_of(c, 2, None),
            Err(AeroError::UnknownVersion { .. })
        ));
    }

    #[test]
    fn provenance_inputs_must_exist() {
        let f = fixture();
        let a = f.asset("A").asset_id;
        let staged = f.store.put_staged(f.col.collection_id, f.col.owner, &b"x"[..]).unwrap();
        let req = CommitRequest {
            asset_id: a,
            checksum: staged.checksum.to_string(),
            size_bytes: 1,
            media_type: "x".into(),
            staged_key: staged.key,
            provenance: Some(ProvenanceInput {
                run_id: RunId::new(),
                function_ref: FunctionId::new(),
                inputs: vec![VersionRef::new(AssetId::new(), 1)],
            }),
        };
        assert!(f.reg.commit_version(&f.store, &req).is_err());
        assert!(f.reg.versions(a).unwrap().is_empty());
    }

    #[test]
    fn visibility_follows_grants() {
        let f = fixture();
        let a = f.asset("A").asset_id;
        let reader = PrincipalId::new();
        assert_eq!(
            f.reg.visibility(a).unwrap(),
            Visibility::Principals(BTreeSet::from([f.col.owner]))
        );
        f.reg
            .grant(f.col.owner, ResourceRef::Asset(a), reader, &BTreeSet::from([Permission::Read]))
            .unwrap();
        assert_eq!(
            f.reg.visibility(a).unwrap(),
            Visibility::Principals(BTreeSet::from([f.col.owner, reader]))
        );
    }

    #[test]
    fn persistent_commit_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let store = CollectionStore::open(dir.path().join("collections")).unwrap();
        let col = store.create(PrincipalId::new()).unwrap();
        let path = dir.path().join("registry.db");
        let a = {
            let reg = Registry::open(&path).unwrap();
            let a = reg
                .create_asset(
                    col.owner,
                    &NewAsset {
                        name: "a".into(),
                        description: String::new(),
                        tags: BTreeSet::new(),
                        collection_ref: col.collection_id,
                        source_url: None,
                        public: true,
                    },
                )
                .unwrap();
            let staged = store.put_staged(col.collection_id, col.owner, &b"data"[..]).unwrap();
            reg.commit_version(
                &store,
                &CommitRequest {
                    asset_id: a.asset_id,
                    checksum: staged.checksum.to_string(),
                    size_bytes: 4,
                    media_type: "x".into(),
                    staged_key: staged.key,
                    provenance: None,
                },
            )
            .unwrap();
            a.asset_id
        };
        let reg = Registry::open(&path).unwrap();
        assert_eq!(reg.versions(a).unwrap().len(), 1);
        // Name index is rebuilt on load.
        assert!(matches!(
            reg.create_asset(
                reg.asset(a).unwrap().owner,
                &NewAsset {
                    name: "a".into(),
                    description: String::new(),
                    tags: BTreeSet::new(),
                    collection_ref: col.collection_id,
                    source_url: None,
                    public: false,
                }
            ),
            Err(AeroError::DuplicateName { .. })
        ));
    }
}
