//! Principals, bearer tokens and resource ACLs.
//!
//! Tokens look like `aero_<token-id>_<secret>`. Only a salted SHA-256 of the
//! secret is stored; the token id selects the record to verify against.

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ids::{AssetId, CollectionId, EndpointId, FlowId, PrincipalId, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permission {
    Read,
    Write,
    Execute,
    Admin,
    ViewRuns,
}

impl std::str::FromStr for Permission {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| format!("unknown permission {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "id")]
pub enum ResourceRef {
    Asset(AssetId),
    Flow(FlowId),
    Collection(CollectionId),
    Endpoint(EndpointId),
}

impl fmt::Display for ResourceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourceRef::Asset(id) => write!(f, "asset {id}"),
            ResourceRef::Flow(id) => write!(f, "flow {id}"),
            ResourceRef::Collection(id) => write!(f, "collection {id}"),
            ResourceRef::Endpoint(id) => write!(f, "endpoint {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub principal_id: PrincipalId,
    pub display_name: String,
    /// May issue tokens for other principals.
    #[serde(default)]
    pub is_admin: bool,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: TokenId,
    pub principal_id: PrincipalId,
    pub salt: String,
    pub hash: String,
    pub created_at: DateTime<Utc>,
    pub expires_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub revoked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AclEntry {
    pub resource: ResourceRef,
    pub principal_id: PrincipalId,
    pub perms: BTreeSet<Permission>,
}

/// A freshly minted token. The secret is shown once and never stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssuedToken {
    pub token_id: TokenId,
    pub principal_id: PrincipalId,
    pub token: String,
    pub expires_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenCheck {
    Valid,
    Expired,
    Invalid,
}

const TOKEN_PREFIX: &str = "aero_";

fn digest(salt: &str, secret: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(b":");
    h.update(secret.as_bytes());
    hex::encode(h.finalize())
}

fn random_hex(bytes: usize) -> String {
    let mut buf = vec![0u8; bytes];
    rand::rng().fill_bytes(&mut buf);
    hex::encode(buf)
}

/// Creates a token record plus the one-time secret string.
pub fn mint_token(
    principal_id: PrincipalId,
    expires_at: Option<DateTime<Utc>>,
) -> (TokenRecord, IssuedToken) {
    let token_id = TokenId::new();
    let secret = random_hex(32);
    let salt = random_hex(16);
    let record = TokenRecord {
        token_id,
        principal_id,
        hash: digest(&salt, &secret),
        salt,
        created_at: Utc::now(),
        expires_at,
        revoked: false,
    };
    let issued = IssuedToken {
        token_id,
        principal_id,
        token: format!("{TOKEN_PREFIX}{}_{secret}", token_id.as_uuid().simple()),
        expires_at,
    };
    (record, issued)
}

/// Splits a token string into its id and secret halves.
pub fn parse_token(token: &str) -> Option<(TokenId, &str)> {
    let rest = token.strip_prefix(TOKEN_PREFIX)?;
    let (id, secret) = rest.split_once('_')?;
    let id = uuid::Uuid::parse_str(id).ok()?;
    Some((TokenId::from(id), secret))
}

impl TokenRecord {
    pub fn check(&self, secret: &str, now: DateTime<Utc>) -> TokenCheck {
        let computed = digest(&self.salt, secret);
        // Constant-time comparison of equal-length hex strings.
        let same = computed.len() == self.hash.len()
            && computed
                .bytes()
                .zip(self.hash.bytes())
                .fold(0u8, |acc, (a, b)| acc | (a ^ b))
                == 0;
        if !same || self.revoked {
            TokenCheck::Invalid
        } else if self.expires_at.is_some_and(|t| t <= now) {
            TokenCheck::Expired
        } else {
            TokenCheck::Valid
        }
    }
}

/// Owners may do anything; everyone else needs a matching grant. Admin implies every action.
pub fn is_allowed<'a>(
    principal: PrincipalId,
    owner: PrincipalId,
    action: Permission,
    grants: impl IntoIterator<Item = &'a BTreeSet<Permission>>,
) -> bool {
    principal == owner
        || grants
            .into_iter()
            .any(|perms| perms.contains(&action) || perms.contains(&Permission::Admin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    #[test]
    fn minted_token_verifies() {
        let p = PrincipalId::new();
        let (rec, issued) = mint_token(p, None);
        let (id, secret) = parse_token(&issued.token).unwrap();
        assert_eq!(id, rec.token_id);
        assert_eq!(rec.check(secret, Utc::now()), TokenCheck::Valid);
        assert_eq!(rec.check("nope", Utc::now()), TokenCheck::Invalid);
        assert!(!rec.hash.contains(secret));
    }

    #[test]
    fn revoked_and_expired_tokens() {
        let (mut rec, issued) = mint_token(PrincipalId::new(), Some(Utc::now() - Duration::seconds(1)));
        let (_, secret) = parse_token(&issued.token).unwrap();
        assert_eq!(rec.check(secret, Utc::now()), TokenCheck::Expired);
        rec.revoked = true;
        assert_eq!(rec.check(secret, Utc::now()), TokenCheck::Invalid);
    }

    #[test]
    fn malformed_tokens_do_not_parse() {
        assert!(parse_token("Bearer x").is_none());
        assert!(parse_token("aero_notauuid_abc").is_none());
        assert!(parse_token("aero_").is_none());
    }

    #[test]
    fn allow_rules() {
        let (owner, other) = (PrincipalId::new(), PrincipalId::new());
        let none: Vec<BTreeSet<Permission>> = vec![];
        assert!(is_allowed(owner, owner, Permission::Admin, &none));
        assert!(!is_allowed(other, owner, Permission::Read, &none));
        let view = vec![BTreeSet::from([Permission::ViewRuns])];
        assert!(is_allowed(other, owner, Permission::ViewRuns, &view));
        assert!(!is_allowed(other, owner, Permission::Write, &view));
        let admin = vec![BTreeSet::from([Permission::Admin])];
        assert!(is_allowed(other, owner, Permission::Write, &admin));
    }

    #[test]
    fn permission_names() {
        assert_eq!("view_runs".parse::<Permission>(), Ok(Permission::ViewRuns));
        assert!("root".parse::<Permission>().is_err());
    }
}
