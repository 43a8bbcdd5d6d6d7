//! Durable catalog of assets, versions, flows, runs, principals and grants.
//!
//! All state lives in one document. Every mutation runs as a transaction under
//! the registry's write lock: it is applied to a draft, the draft is written to
//! `registry.db` (temp file, fsync, rename), and only then swapped in. Readers
//! never observe a half-applied change. Without a path the registry is purely
//! in memory.

mod assets;
mod flows;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::auth::{self, AclEntry, IssuedToken, Permission, Principal, ResourceRef, TokenCheck, TokenRecord};
use crate::error::{AeroError, Result};
use crate::executor::{validate_entry, EndpointRef, FunctionRef};
use crate::ids::{AssetId, EndpointId, FlowId, FunctionId, PrincipalId, RunId, TokenId};
use crate::model::{DataAsset, DataVersion, DeliveryRecord, FlowRun, FlowSpec};

pub use assets::{CommitRequest, ProvenanceInput};
pub use flows::canonical_dedup_key;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AssetRow {
    asset: DataAsset,
    versions: Vec<DataVersion>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct State {
    schema_version: u32,
    assets: BTreeMap<AssetId, AssetRow>,
    flows: BTreeMap<FlowId, FlowSpec>,
    runs: BTreeMap<RunId, FlowRun>,
    functions: BTreeMap<FunctionId, FunctionRef>,
    endpoints: BTreeMap<EndpointId, EndpointRef>,
    principals: BTreeMap<PrincipalId, Principal>,
    tokens: BTreeMap<TokenId, TokenRecord>,
    acl: Vec<AclEntry>,
    deliveries: Vec<DeliveryRecord>,
    #[serde(skip)]
    derived: Derived,
}

/// Lookup tables rebuilt from the persisted rows on load.
#[derive(Debug, Clone, Default)]
struct Derived {
    /// dedup key -> live flow
    dedup: HashMap<String, FlowId>,
    /// asset -> live update-rule flows watching its latest version
    dependents: BTreeMap<AssetId, BTreeSet<FlowId>>,
    /// (owner, name) -> live asset
    names: HashMap<(PrincipalId, String), AssetId>,
}

impl State {
    fn rebuild_derived(&mut self) {
        let mut d = Derived::default();
        for row in self.assets.values().filter(|r| !r.asset.deleted) {
            d.names
                .insert((row.asset.owner, row.asset.name.clone()), row.asset.asset_id);
        }
        for flow in self.flows.values().filter(|f| !f.deleted) {
            d.dedup.insert(flow.dedup_key.clone(), flow.flow_id);
            if flow.rule.is_update_rule() {
                for asset in flow.monitored_inputs().values() {
                    d.dependents.entry(*asset).or_default().insert(flow.flow_id);
                }
            }
        }
        self.derived = d;
    }

    fn live_asset(&self, id: AssetId) -> Result<&AssetRow> {
        self.assets
            .get(&id)
            .filter(|r| !r.asset.deleted)
            .ok_or(AeroError::UnknownAsset(id))
    }

    fn grants(&self, resource: ResourceRef, principal: PrincipalId) -> Option<&BTreeSet<Permission>> {
        self.acl
            .iter()
            .find(|e| e.resource == resource && e.principal_id == principal)
            .map(|e| &e.perms)
    }

    fn owner_of(&self, resource: ResourceRef) -> Result<PrincipalId> {
        match resource {
            ResourceRef::Asset(id) => Ok(self.live_asset(id)?.asset.owner),
            ResourceRef::Flow(id) => self
                .flows
                .get(&id)
                .filter(|f| !f.deleted)
                .map(|f| f.owner)
                .ok_or(AeroError::UnknownFlow(id)),
            ResourceRef::Endpoint(id) => self
                .endpoints
                .get(&id)
                .map(|e| e.owner)
                .ok_or(AeroError::UnknownEndpoint(id)),
            ResourceRef::Collection(_) => Err(AeroError::InvalidRequest(
                "collection grants are held by the collection store".into(),
            )),
        }
    }

    fn allowed(&self, principal: PrincipalId, resource: ResourceRef, action: Permission) -> Result<bool> {
        let owner = self.owner_of(resource)?;
        Ok(auth::is_allowed(
            principal,
            owner,
            action,
            self.grants(resource, principal),
        ))
    }

    fn authorize(&self, principal: PrincipalId, resource: ResourceRef, action: Permission) -> Result<()> {
        if self.allowed(principal, resource, action)? {
            Ok(())
        } else {
            Err(AeroError::Forbidden(format!("{action:?} on {resource} not granted")))
        }
    }
}

pub struct Registry {
    state: RwLock<State>,
    path: Option<PathBuf>,
}

impl Registry {
    pub fn in_memory() -> Self {
        Self {
            state: RwLock::new(State {
                schema_version: SCHEMA_VERSION,
                ..State::default()
            }),
            path: None,
        }
    }

    /// Opens the store at `path` (normally `state/registry.db`), creating it if absent.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut state = if path.exists() {
            let bytes = fs::read(&path)?;
            let st: State = serde_json::from_slice(&bytes)
                .map_err(|e| AeroError::Persist(format!("{}: {e}", path.display())))?;
            if st.schema_version != SCHEMA_VERSION {
                return Err(AeroError::Persist(format!(
                    "schema version {} is not supported (expected {SCHEMA_VERSION})",
                    st.schema_version
                )));
            }
            st
        } else {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            let st = State {
                schema_version: SCHEMA_VERSION,
                ..State::default()
            };
            persist(&path, &st)?;
            st
        };
        state.rebuild_derived();
        Ok(Self {
            state: RwLock::new(state),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn transact<R>(&self, f: impl FnOnce(&mut State) -> Result<R>) -> Result<R> {
        let mut st = self.state.write();
        match &self.path {
            None => f(&mut st),
            Some(path) => {
                let mut draft = st.clone();
                let out = f(&mut draft)?;
                persist(path, &draft)?;
                *st = draft;
                Ok(out)
            }
        }
    }

    fn read<R>(&self, f: impl FnOnce(&State) -> R) -> R {
        f(&self.state.read())
    }

    // --- principals and tokens ---

    pub fn create_principal(&self, display_name: &str, is_admin: bool) -> Result<Principal> {
        let p = Principal {
            principal_id: PrincipalId::new(),
            display_name: display_name.to_owned(),
            is_admin,
            created_at: Utc::now(),
        };
        self.transact(|st| {
            st.principals.insert(p.principal_id, p.clone());
            Ok(())
        })?;
        Ok(p)
    }

    pub fn principal(&self, id: PrincipalId) -> Result<Principal> {
        self.read(|st| st.principals.get(&id).cloned())
            .ok_or_else(|| AeroError::InvalidRequest(format!("unknown principal {id}")))
    }

    pub fn principals(&self) -> Vec<Principal> {
        self.read(|st| st.principals.values().cloned().collect())
    }

    pub fn issue_token(
        &self,
        principal: PrincipalId,
        expires_at: Option<DateTime<Utc>>,
    ) -> Result<IssuedToken> {
        let (record, issued) = auth::mint_token(principal, expires_at);
        self.transact(|st| {
            if !st.principals.contains_key(&principal) {
                return Err(AeroError::InvalidRequest(format!("unknown principal {principal}")));
            }
            st.tokens.insert(record.token_id, record);
            Ok(())
        })?;
        Ok(issued)
    }

    pub fn revoke_token(&self, token_id: TokenId) -> Result<()> {
        self.transact(|st| {
            let t = st
                .tokens
                .get_mut(&token_id)
                .ok_or_else(|| AeroError::InvalidRequest(format!("unknown token {token_id}")))?;
            t.revoked = true;
            Ok(())
        })
    }

    /// Resolves a bearer token to its principal.
    pub fn authenticate(&self, token: &str) -> Result<Principal> {
        self.authenticate_at(token, Utc::now())
    }

    pub fn authenticate_at(&self, token: &str, now: DateTime<Utc>) -> Result<Principal> {
        let (id, secret) = auth::parse_token(token).ok_or(AeroError::Unauthenticated)?;
        self.read(|st| {
            let rec = st.tokens.get(&id).ok_or(AeroError::Unauthenticated)?;
            match rec.check(secret, now) {
                TokenCheck::Valid => st
                    .principals
                    .get(&rec.principal_id)
                    .cloned()
                    .ok_or(AeroError::Unauthenticated),
                TokenCheck::Expired | TokenCheck::Invalid => Err(AeroError::Unauthenticated),
            }
        })
    }

    // --- ACLs ---

    /// Adds `perms` for `principal` on `resource`. The caller must hold admin on it.
    pub fn grant(
        &self,
        caller: PrincipalId,
        resource: ResourceRef,
        principal: PrincipalId,
        perms: &BTreeSet<Permission>,
    ) -> Result<()> {
        self.transact(|st| {
            st.authorize(caller, resource, Permission::Admin)?;
            match st
                .acl
                .iter_mut()
                .find(|e| e.resource == resource && e.principal_id == principal)
            {
                Some(e) => e.perms.extend(perms.iter().copied()),
                None => st.acl.push(AclEntry {
                    resource,
                    principal_id: principal,
                    perms: perms.clone(),
                }),
            }
            Ok(())
        })
    }

    pub fn revoke(
        &self,
        caller: PrincipalId,
        resource: ResourceRef,
        principal: PrincipalId,
        perms: &BTreeSet<Permission>,
    ) -> Result<()> {
        self.transact(|st| {
            st.authorize(caller, resource, Permission::Admin)?;
            for e in st
                .acl
                .iter_mut()
                .filter(|e| e.resource == resource && e.principal_id == principal)
            {
                e.perms.retain(|p| !perms.contains(p));
            }
            st.acl.retain(|e| !e.perms.is_empty());
            Ok(())
        })
    }

    pub fn acl_for(&self, resource: ResourceRef) -> Vec<AclEntry> {
        self.read(|st| st.acl.iter().filter(|e| e.resource == resource).cloned().collect())
    }

    pub fn is_allowed(&self, principal: PrincipalId, resource: ResourceRef, action: Permission) -> Result<bool> {
        self.read(|st| st.allowed(principal, resource, action))
    }

    /// Ok if `principal` owns `resource` or holds a grant for `action` on it.
    pub fn authorize(&self, principal: PrincipalId, resource: ResourceRef, action: Permission) -> Result<()> {
        self.read(|st| st.authorize(principal, resource, action))
    }

    // --- functions and endpoints ---

    pub fn register_function(
        &self,
        entry: Vec<String>,
        description: &str,
        principal: PrincipalId,
    ) -> Result<FunctionRef> {
        validate_entry(&entry)?;
        let f = FunctionRef {
            function_id: FunctionId::new(),
            entry,
            description: description.to_owned(),
            registered_by: principal,
            created_at: Utc::now(),
        };
        self.transact(|st| {
            st.functions.insert(f.function_id, f.clone());
            Ok(())
        })?;
        Ok(f)
    }

    pub fn function(&self, id: FunctionId) -> Result<FunctionRef> {
        self.read(|st| st.functions.get(&id).cloned())
            .ok_or(AeroError::UnknownFunction(id))
    }

    pub fn register_endpoint(&self, endpoint: EndpointRef) -> Result<EndpointRef> {
        endpoint.validate()?;
        self.transact(|st| {
            if let Some(allowed) = &endpoint.allowed_functions {
                if let Some(missing) = allowed.iter().find(|f| !st.functions.contains_key(f)) {
                    return Err(AeroError::UnknownFunction(*missing));
                }
            }
            st.endpoints.insert(endpoint.endpoint_id, endpoint.clone());
            Ok(())
        })?;
        Ok(endpoint)
    }

    pub fn endpoint(&self, id: EndpointId) -> Result<EndpointRef> {
        self.read(|st| st.endpoints.get(&id).cloned())
            .ok_or(AeroError::UnknownEndpoint(id))
    }

    pub fn endpoints(&self) -> Vec<EndpointRef> {
        self.read(|st| st.endpoints.values().cloned().collect())
    }

    // --- notifications ---

    pub fn record_delivery(&self, record: DeliveryRecord) -> Result<()> {
        self.transact(|st| {
            st.deliveries.push(record);
            Ok(())
        })
    }

    pub fn deliveries(&self) -> Vec<DeliveryRecord> {
        self.read(|st| st.deliveries.clone())
    }
}

fn persist(path: &Path, st: &State) -> Result<()> {
    let tmp = path.with_extension("db.tmp");
    let bytes = serde_json::to_vec(st).map_err(|e| AeroError::Persist(e.to_string()))?;
    let mut f = File::create(&tmp).map_err(|e| AeroError::Persist(e.to_string()))?;
    f.write_all(&bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| AeroError::Persist(e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| AeroError::Persist(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_authenticate_until_revoked() {
        let r = Registry::in_memory();
        let p = r.create_principal("alice", false).unwrap();
        let t = r.issue_token(p.principal_id, None).unwrap();
        assert_eq!(r.authenticate(&t.token).unwrap(), p);
        assert!(matches!(r.authenticate("garbage"), Err(AeroError::Unauthenticated)));
        r.revoke_token(t.token_id).unwrap();
        assert!(matches!(r.authenticate(&t.token), Err(AeroError::Unauthenticated)));
    }

    #[test]
    fn expired_token_rejected() {
        let r = Registry::in_memory();
        let p = r.create_principal("bob", false).unwrap();
        let soon = Utc::now() + chrono::Duration::seconds(60);
        let t = r.issue_token(p.principal_id, Some(soon)).unwrap();
        assert!(r.authenticate(&t.token).is_ok());
        assert!(r
            .authenticate_at(&t.token, soon + chrono::Duration::seconds(1))
            .is_err());
    }

    #[test]
    fn function_registration() {
        let r = Registry::in_memory();
        let p = PrincipalId::new();
        let a = r.register_function(vec!["sh".into()], "x", p).unwrap();
        let b = r.register_function(vec!["sh".into()], "x", p).unwrap();
        assert_ne!(a.function_id, b.function_id);
        assert!(matches!(
            r.register_function(vec![], "", p),
            Err(AeroError::InvalidEntry(_))
        ));
    }

    #[test]
    fn state_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state").join("registry.db");
        let (p, t) = {
            let r = Registry::open(&path).unwrap();
            let p = r.create_principal("carol", true).unwrap();
            (p.clone(), r.issue_token(p.principal_id, None).unwrap())
        };
        let r = Registry::open(&path).unwrap();
        assert_eq!(r.authenticate(&t.token).unwrap(), p);
    }

    #[test]
    fn rejects_unknown_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.db");
        fs::write(&path, br#"{"schema_version": 99, "assets": {}, "flows": {}, "runs": {}, "functions": {}, "endpoints": {}, "principals": {}, "tokens": {}, "acl": [], "deliveries": []}"#).unwrap();
        assert!(matches!(Registry::open(&path), Err(AeroError::Persist(_))));
    }
}
