//! Terminal-failure notifications.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ids::{FlowId, RunId};
use crate::model::{DeliveryRecord, RunStatus};

/// Body of a notification, as POSTed to webhook sinks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub flow_id: FlowId,
    pub run_id: RunId,
    pub status: RunStatus,
    pub error_message: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub enum Notifier {
    /// Writes the notification to the service log.
    Log,
    Webhook { url: String, client: reqwest::Client },
}

impl Notifier {
    pub fn webhook(url: impl Into<String>) -> Self {
        Notifier::Webhook {
            url: url.into(),
            client: reqwest::Client::builder()
                .timeout(std::time::Duration::from_secs(10))
                .build()
                .expect("static client config"),
        }
    }

    pub fn sink_name(&self) -> String {
        match self {
            Notifier::Log => "log".into(),
            Notifier::Webhook { url, .. } => format!("webhook:{url}"),
        }
    }

    /// Sends one notification. Failures are reported in the record, never retried.
    pub async fn deliver(&self, contact: &str, note: &Notification) -> DeliveryRecord {
        let result = match self {
            Notifier::Log => {
                tracing::warn!(
                    flow = %note.flow_id,
                    run = %note.run_id,
                    contact,
                    status = ?note.status,
                    "flow failed: {}",
                    note.error_message
                );
                Ok(())
            }
            Notifier::Webhook { url, client } => match client.post(url).json(note).send().await {
                Ok(r) if r.status().is_success() => Ok(()),
                Ok(r) => Err(format!("webhook answered HTTP {}", r.status().as_u16())),
                Err(e) => Err(format!("webhook unreachable: {e}")),
            },
        };
        if let Err(e) = &result {
            tracing::error!(flow = %note.flow_id, run = %note.run_id, "notification failed: {e}");
        }
        DeliveryRecord {
            flow_id: note.flow_id,
            run_id: note.run_id,
            contact: contact.to_owned(),
            sink: self.sink_name(),
            delivered: result.is_ok(),
            error: result.err(),
            at: Utc::now(),
        }
    }
}
