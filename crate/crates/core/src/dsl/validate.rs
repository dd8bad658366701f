use super::{Diagnostic, Mode, PipelineDef, StepKind};
use crate::cron::parse_cron;

/// Cross-field checks on a parsed pipeline. An empty result means the
/// pipeline can be planned and executed.
pub fn validate(def: &PipelineDef) -> Vec<Diagnostic> {
    let src = def.source_name.as_str();
    let mut out = Vec::new();

    for trigger in &def.triggers {
        if let Err(e) = parse_cron(&trigger.cron_expression) {
            out.push(Diagnostic::error(src, trigger.span, e.to_string()));
        }
    }

    let mode = def.delivery.mode;
    let active: Vec<_> = def.stages.iter().filter(|s| s.when_mode.admits(mode)).collect();
    if active.is_empty() && !def.stages.is_empty() {
        out.push(Diagnostic::error(
            src,
            def.delivery.span,
            format!("no stage runs in {mode} mode"),
        ));
    }

    let active_steps: Vec<_> = active.iter().flat_map(|s| s.steps()).collect();
    if mode == Mode::Deployment && !active_steps.iter().any(|s| s.kind == StepKind::Publish) {
        out.push(Diagnostic::error(
            src,
            def.delivery.span,
            "deployment mode requires a `publish` step",
        ));
    }

    let mut seen_upload = false;
    for step in &active_steps {
        match step.kind {
            StepKind::Upload => {
                seen_upload = true;
                if def.delivery.distribution_endpoint.is_none() {
                    out.push(Diagnostic::error(
                        src,
                        step.span,
                        "`upload` requires `distribution_endpoint` in the delivery block",
                    ));
                }
            }
            StepKind::NotifyUsers => {
                if def.delivery.user_recipients.is_empty() {
                    out.push(Diagnostic::error(
                        src,
                        step.span,
                        "`notify_users` requires at least one entry in `recipients`",
                    ));
                }
                if !seen_upload {
                    out.push(Diagnostic::error(
                        src,
                        step.span,
                        "`notify_users` needs an earlier `upload` step to link to",
                    ));
                }
            }
            _ => {}
        }
    }

    for step in &def.post {
        if step.kind == StepKind::NotifyTeam && def.delivery.team_webhook_url.is_none() {
            out.push(Diagnostic::error(
                src,
                step.span,
                "`notify_team` requires `team_webhook` in the delivery block",
            ));
        }
    }

    if def.signing.is_none() {
        for stage in &active {
            let flagged = stage.requires_signing
                || matches!(&stage.body, super::StageBody::Parallel(b) if b.iter().any(|b| b.requires_signing));
            if flagged {
                out.push(Diagnostic::error(
                    src,
                    stage.span,
                    format!("stage {:?} requires signing but there is no `signing` block", stage.name),
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_pipeline;

    fn messages(text: &str) -> Vec<String> {
        validate(&parse_pipeline(text, "P").unwrap()).into_iter().map(|d| d.message).collect()
    }

    #[test]
    fn clean_minimal() {
        assert!(messages(r#"pipeline { stage "A" { sh "true" } }"#).is_empty());
    }

    #[test]
    fn bad_cron_minute() {
        let m = messages(r#"pipeline { triggers { pollSCM "61 * * * *" } stage "A" { sh "true" } }"#);
        assert_eq!(m.len(), 1);
        assert!(m[0].starts_with("minute field out of range"), "{m:?}");
    }

    #[test]
    fn deployment_needs_publish() {
        let m = messages(r#"pipeline { stage "A" { sh "true" } delivery { mode deployment } }"#);
        assert_eq!(m, vec!["deployment mode requires a `publish` step".to_string()]);
        let m = messages(
            r#"pipeline { stage "A" { sh "true" } stage "P" { when_mode delivery publish "p" }
               delivery { mode deployment } }"#,
        );
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn delivery_prerequisites() {
        let m = messages(r#"pipeline { stage "D" { notify_users upload } post { notify_team } }"#);
        assert_eq!(
            m,
            vec![
                "`notify_users` requires at least one entry in `recipients`".to_string(),
                "`notify_users` needs an earlier `upload` step to link to".to_string(),
                "`upload` requires `distribution_endpoint` in the delivery block".to_string(),
                "`notify_team` requires `team_webhook` in the delivery block".to_string(),
            ]
        );
    }

    #[test]
    fn signing_required() {
        let m = messages(r#"pipeline { stage "R" { requires_signing sh "x" } }"#);
        assert_eq!(m, vec![r#"stage "R" requires signing but there is no `signing` block"#.to_string()]);
    }

    #[test]
    fn everything_guarded_out() {
        let m = messages(r#"pipeline { stage "A" { when_mode deployment sh "x" } }"#);
        assert_eq!(m, vec!["no stage runs in delivery mode".to_string()]);
    }
}
