//! Opaque identifiers. Every id is a random 128-bit UUID rendered as text.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

macro_rules! define_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Uuid);

        impl $name {
            /// Fresh random identifier.
            pub fn new() -> Self {
                Self(Uuid::new_v4())
            }

            pub fn as_uuid(&self) -> &Uuid {
                &self.0
            }
        }

        impl Default for $name {
            fn default() -> Self {
                Self::new()
            }
        }

        impl From<Uuid> for $name {
            fn from(u: Uuid) -> Self {
                Self(u)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.hyphenated().fmt(f)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.0)
            }
        }

        impl FromStr for $name {
            type Err = uuid::Error;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Uuid::parse_str(s).map(Self)
            }
        }
    };
}

define_id!(
    /// A monitored data asset.
    AssetId
);
define_id!(
    /// A registered flow.
    FlowId
);
define_id!(
    /// One execution attempt of a flow.
    RunId
);
define_id!(
    /// An authenticated user or service identity.
    PrincipalId
);
define_id!(
    /// A storage namespace served by the collection server.
    CollectionId
);
define_id!(
    /// A registered user function.
    FunctionId
);
define_id!(
    /// A compute endpoint that accepts function submissions.
    EndpointId
);
define_id!(
    /// An object inside a collection, either staged or persistent.
    StorageKey
);
define_id!(
    /// A task submitted to an endpoint.
    TaskId
);
define_id!(
    /// An issued bearer token (the public half of the token string).
    TokenId
);
