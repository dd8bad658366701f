//! Final-stage effects: artifact collection, distribution upload, team and
//! user notification, and the delivery/deployment publish decision.

mod artifact;
mod notify;
mod upload;

use serde::{Deserialize, Serialize};

use crate::dsl::Mode;

pub use artifact::{collect_artifact, sha256_file, Artifact, ArtifactError, ArtifactKind};
pub use notify::{notify_team, notify_users, team_message, Audience, NotificationMessage, NotifyError};
pub use upload::{upload_artifact, DistributionReceipt, RetryPolicy, UploadError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublishDecision {
    RunNow,
    AwaitPromotion,
}

/// Deployment publishes inline; delivery waits for a manual promotion.
pub fn publish_decision(mode: Mode) -> PublishDecision {
    match mode {
        Mode::Deployment => PublishDecision::RunNow,
        Mode::Delivery => PublishDecision::AwaitPromotion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decisions() {
        assert_eq!(publish_decision(Mode::Deployment), PublishDecision::RunNow);
        assert_eq!(publish_decision(Mode::Delivery), PublishDecision::AwaitPromotion);
    }
}
