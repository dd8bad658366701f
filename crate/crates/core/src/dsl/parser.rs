use std::collections::HashSet;
use std::path::Path;

use super::lexer::{tokenize, Tok, Token};
use super::{
    DeliveryConfig, Diagnostic, GateKind, Mode, PipelineDef, SigningConfig, Span, StageBody, StageDef,
    StepDef, StepKind, TriggerDef, WhenMode, DEFAULT_BRANCH, DEFAULT_STEP_TIMEOUT_SECONDS,
};

/// Parses a pipeline document. Syntax errors stop at the first offending
/// token; semantic errors are collected and reported together.
pub fn parse_pipeline(text: &str, source_name: &str) -> Result<PipelineDef, Vec<Diagnostic>> {
    let tokens = tokenize(text, source_name).map_err(|d| vec![d])?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        source: source_name,
        semantic: Vec::new(),
    };
    let def = parser.document().map_err(|d| vec![d])?;
    if parser.semantic.is_empty() {
        Ok(def)
    } else {
        Err(parser.semantic)
    }
}

/// Like [`parse_pipeline`] but accepts raw bytes, reporting invalid UTF-8
/// as a diagnostic.
pub fn parse_pipeline_bytes(bytes: &[u8], source_name: &str) -> Result<PipelineDef, Vec<Diagnostic>> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_pipeline(text, source_name),
        Err(e) => {
            let valid = std::str::from_utf8(&bytes[..e.valid_up_to()]).unwrap_or_default();
            let line = valid.matches('\n').count() + 1;
            let column = valid.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
            Err(vec![Diagnostic::error(
                source_name,
                Span::new(line, column),
                "file is not valid UTF-8",
            )])
        }
    }
}

fn default_pipeline_name(source_name: &str) -> String {
    Path::new(source_name)
        .parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pipeline".to_string())
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    source: &'a str,
    semantic: Vec<Diagnostic>,
}

type PResult<T> = Result<T, Diagnostic>;

impl<'a> Parser<'a> {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn next(&mut self) -> Token {
        let t = self.peek().clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, token: &Token, expected: &str) -> Diagnostic {
        Diagnostic::error(
            self.source,
            token.span,
            format!("unexpected {}, expected {expected}", token.tok.describe()),
        )
    }

    fn semantic(&mut self, span: Span, message: impl Into<String>) {
        self.semantic.push(Diagnostic::error(self.source, span, message));
    }

    fn expect_lbrace(&mut self) -> PResult<Span> {
        let t = self.next();
        match t.tok {
            Tok::LBrace => Ok(t.span),
            _ => Err(self.unexpected(&t, "`{`")),
        }
    }

    fn expect_string(&mut self, what: &str) -> PResult<(String, Span)> {
        let t = self.next();
        match t.tok {
            Tok::Str(s) => Ok((s, t.span)),
            _ => Err(self.unexpected(&t, what)),
        }
    }

    fn expect_number(&mut self, what: &str) -> PResult<(u64, Span)> {
        let t = self.next();
        match t.tok {
            Tok::Number(n) => Ok((n, t.span)),
            _ => Err(self.unexpected(&t, what)),
        }
    }

    /// A string or bare word, for enum-valued attributes.
    fn expect_word(&mut self, what: &str) -> PResult<(String, Span)> {
        let t = self.next();
        match t.tok {
            Tok::Str(s) | Tok::Ident(s) => Ok((s, t.span)),
            _ => Err(self.unexpected(&t, what)),
        }
    }

    /// Consumes a `}` if next, reporting whether the block closed.
    fn at_block_end(&mut self) -> PResult<bool> {
        match self.peek().tok {
            Tok::RBrace => {
                self.next();
                Ok(true)
            }
            Tok::Eof => {
                let t = self.peek().clone();
                Err(self.unexpected(&t, "`}`"))
            }
            _ => Ok(false),
        }
    }

    fn document(&mut self) -> PResult<PipelineDef> {
        let t = self.next();
        if t.tok != Tok::Ident("pipeline".into()) {
            return Err(self.unexpected(&t, "`pipeline`"));
        }
        let pipeline_span = t.span;
        let name = match &self.peek().tok {
            Tok::Str(_) => self.expect_string("pipeline name")?.0,
            _ => default_pipeline_name(self.source),
        };
        self.expect_lbrace()?;

        let mut triggers: Option<Vec<TriggerDef>> = None;
        let mut environment: Option<Vec<(String, String)>> = None;
        let mut delivery: Option<DeliveryConfig> = None;
        let mut signing: Option<Option<SigningConfig>> = None;
        let mut post: Option<Vec<StepDef>> = None;
        let mut stages = Vec::new();

        while !self.at_block_end()? {
            let t = self.next();
            let word = match &t.tok {
                Tok::Ident(w) => w.clone(),
                _ => return Err(self.unexpected(&t, "a pipeline section")),
            };
            match word.as_str() {
                "stage" => stages.push(self.stage(false)?),
                "triggers" => {
                    let block = self.triggers()?;
                    self.once(&mut triggers, block, "triggers", t.span);
                }
                "environment" => {
                    let block = self.env_block()?;
                    self.once(&mut environment, block, "environment", t.span);
                }
                "delivery" => {
                    let block = self.delivery(t.span)?;
                    self.once(&mut delivery, block, "delivery", t.span);
                }
                "signing" => {
                    let block = self.signing(t.span)?;
                    self.once(&mut signing, block, "signing", t.span);
                }
                "post" => {
                    let block = self.post()?;
                    self.once(&mut post, block, "post", t.span);
                }
                _ => return Err(self.unexpected(&t, "a pipeline section")),
            }
        }
        let t = self.next();
        if t.tok != Tok::Eof {
            return Err(self.unexpected(&t, "end of file"));
        }

        if stages.is_empty() {
            self.semantic(pipeline_span, "pipeline has no stages");
        }
        let mut seen = HashSet::new();
        let mut all: Vec<(&str, Span)> = Vec::new();
        for stage in &stages {
            all.push((&stage.name, stage.span));
            if let StageBody::Parallel(branches) = &stage.body {
                all.extend(branches.iter().map(|b| (b.name.as_str(), b.span)));
            }
        }
        let duplicates: Vec<(String, Span)> = all
            .into_iter()
            .filter(|(name, _)| !seen.insert(*name))
            .map(|(n, s)| (n.to_string(), s))
            .collect();
        for (name, span) in duplicates {
            self.semantic(span, format!("duplicate stage name {name:?}"));
        }

        Ok(PipelineDef {
            name,
            triggers: triggers.unwrap_or_default(),
            environment: environment.unwrap_or_default(),
            stages,
            delivery: delivery.unwrap_or_default(),
            signing: signing.flatten(),
            post: post.unwrap_or_default(),
            source_name: self.source.to_string(),
        })
    }

    fn once<T>(&mut self, slot: &mut Option<T>, value: T, name: &str, span: Span) {
        if slot.is_some() {
            self.semantic(span, format!("duplicate `{name}` block"));
        } else {
            *slot = Some(value);
        }
    }

    fn triggers(&mut self) -> PResult<Vec<TriggerDef>> {
        self.expect_lbrace()?;
        let mut out = Vec::new();
        while !self.at_block_end()? {
            let t = self.next();
            if t.tok != Tok::Ident("pollSCM".into()) {
                return Err(self.unexpected(&t, "`pollSCM`"));
            }
            let (cron_expression, _) = self.expect_string("a cron expression string")?;
            let mut trigger = TriggerDef {
                cron_expression,
                repo: ".".to_string(),
                branch: DEFAULT_BRANCH.to_string(),
                head_cmd: None,
                span: t.span,
            };
            loop {
                let word = match &self.peek().tok {
                    Tok::Ident(w) if matches!(w.as_str(), "repo" | "branch" | "head_cmd") => w.clone(),
                    _ => break,
                };
                self.next();
                let (value, span) = self.expect_string(&format!("a string after `{word}`"))?;
                if value.is_empty() {
                    self.semantic(span, format!("`{word}` must not be empty"));
                }
                match word.as_str() {
                    "repo" => trigger.repo = value,
                    "branch" => trigger.branch = value,
                    _ => trigger.head_cmd = Some(value),
                }
            }
            out.push(trigger);
        }
        Ok(out)
    }

    fn env_block(&mut self) -> PResult<Vec<(String, String)>> {
        self.expect_lbrace()?;
        let mut vars: Vec<(String, String)> = Vec::new();
        while !self.at_block_end()? {
            let t = self.next();
            let name = match t.tok {
                Tok::Ident(name) => name,
                _ => return Err(self.unexpected(&t, "an environment variable name")),
            };
            let (value, _) = self.expect_string("a string value")?;
            if vars.iter().any(|(n, _)| *n == name) {
                self.semantic(t.span, format!("duplicate environment variable `{name}`"));
                continue;
            }
            vars.push((name, value));
        }
        Ok(vars)
    }

    fn stage(&mut self, in_parallel: bool) -> PResult<StageDef> {
        let start = self.tokens[self.pos - 1].span;
        let (name, name_span) = self.expect_string("a stage name string")?;
        if name.is_empty() {
            self.semantic(name_span, "stage name must not be empty");
        }
        self.expect_lbrace()?;
        let mut steps = Vec::new();
        let mut branches: Option<Vec<StageDef>> = None;
        let mut when_mode: Option<WhenMode> = None;
        let mut requires_signing = false;

        while !self.at_block_end()? {
            let t = self.next();
            let word = match &t.tok {
                Tok::Ident(w) => w.clone(),
                _ => return Err(self.unexpected(&t, "a step or stage setting")),
            };
            match word.as_str() {
                "parallel" => {
                    if in_parallel {
                        return Err(Diagnostic::error(
                            self.source,
                            t.span,
                            "nested parallel blocks are not supported",
                        ));
                    }
                    let group = self.parallel(t.span)?;
                    if branches.is_some() {
                        self.semantic(t.span, format!("stage {name:?} has more than one parallel block"));
                    } else {
                        branches = Some(group);
                    }
                }
                "when_mode" => {
                    let (value, span) = self.expect_word("`always`, `delivery` or `deployment`")?;
                    let parsed = match value.as_str() {
                        "always" => WhenMode::Always,
                        "delivery" => WhenMode::Only(Mode::Delivery),
                        "deployment" => WhenMode::Only(Mode::Deployment),
                        _ => {
                            self.semantic(span, format!("unknown when_mode {value:?}"));
                            WhenMode::Always
                        }
                    };
                    if in_parallel {
                        self.semantic(t.span, "when_mode is only allowed on top-level stages");
                    } else if when_mode.is_some() {
                        self.semantic(t.span, "duplicate `when_mode`");
                    }
                    when_mode = Some(parsed);
                }
                "requires_signing" => requires_signing = true,
                _ => match StepKind::from_keyword(&word) {
                    Some(kind) => {
                        let step = self.step(kind, t.span)?;
                        if kind == StepKind::NotifyTeam {
                            self.semantic(t.span, "`notify_team` belongs in the `post` block");
                        }
                        steps.push(step);
                    }
                    None => return Err(self.unexpected(&t, "a step or stage setting")),
                },
            }
        }

        let body = match branches {
            Some(branches) => {
                if !steps.is_empty() {
                    self.semantic(start, format!("stage {name:?} mixes steps with a parallel block"));
                }
                if requires_signing {
                    self.semantic(start, "requires_signing belongs on a parallel branch, not the group");
                }
                StageBody::Parallel(branches)
            }
            None => {
                if steps.is_empty() {
                    self.semantic(start, format!("stage {name:?} is empty"));
                }
                StageBody::Steps(steps)
            }
        };
        Ok(StageDef {
            name,
            body,
            when_mode: when_mode.unwrap_or_default(),
            requires_signing,
            span: start,
        })
    }

    fn parallel(&mut self, span: Span) -> PResult<Vec<StageDef>> {
        self.expect_lbrace()?;
        let mut branches = Vec::new();
        while !self.at_block_end()? {
            let t = self.next();
            if t.tok != Tok::Ident("stage".into()) {
                return Err(self.unexpected(&t, "`stage`"));
            }
            branches.push(self.stage(true)?);
        }
        if branches.len() < 2 {
            self.semantic(span, "parallel block needs at least 2 stages");
        }
        Ok(branches)
    }

    fn step(&mut self, kind: StepKind, span: Span) -> PResult<StepDef> {
        let mut step = StepDef::new(kind, "");
        step.span = span;
        if kind.takes_command() {
            let (command, cspan) = self.expect_string(&format!("a command string after `{kind}`"))?;
            if command.trim().is_empty() {
                self.semantic(cspan, format!("`{kind}` command must not be empty"));
            }
            step.command = command;
        }
        loop {
            let word = match &self.peek().tok {
                Tok::Ident(w) if matches!(w.as_str(), "timeout" | "env" | "gate") => w.clone(),
                _ => break,
            };
            let opt = self.next();
            match word.as_str() {
                "timeout" => {
                    let (n, nspan) = self.expect_number("a timeout in seconds")?;
                    if n == 0 {
                        self.semantic(nspan, "timeout must be positive");
                    }
                    step.timeout_seconds = n;
                }
                "env" => step.env = self.env_block()?,
                _ => {
                    let (value, vspan) = self.expect_word("a gate name")?;
                    if value != "acceptance" {
                        self.semantic(vspan, format!("unknown gate {value:?}"));
                    }
                    if kind != StepKind::Sh {
                        self.semantic(opt.span, "gates apply to `sh` steps only");
                    }
                    step.gate = Some(GateKind::Acceptance);
                }
            }
        }
        if step.timeout_seconds == 0 {
            step.timeout_seconds = DEFAULT_STEP_TIMEOUT_SECONDS;
        }
        Ok(step)
    }

    fn post(&mut self) -> PResult<Vec<StepDef>> {
        self.expect_lbrace()?;
        let mut steps = Vec::new();
        while !self.at_block_end()? {
            let t = self.next();
            match &t.tok {
                Tok::Ident(w) if w == "notify_team" => steps.push(self.step(StepKind::NotifyTeam, t.span)?),
                Tok::Ident(w) if StepKind::from_keyword(w).is_some() => {
                    let kind = StepKind::from_keyword(w).expect("checked");
                    self.step(kind, t.span)?;
                    self.semantic(t.span, "only `notify_team` is allowed in the `post` block");
                }
                _ => return Err(self.unexpected(&t, "`notify_team`")),
            }
        }
        Ok(steps)
    }

    fn delivery(&mut self, span: Span) -> PResult<DeliveryConfig> {
        self.expect_lbrace()?;
        let mut cfg = DeliveryConfig { span, ..DeliveryConfig::default() };
        let mut seen: HashSet<String> = HashSet::new();
        while !self.at_block_end()? {
            let t = self.next();
            let key = match &t.tok {
                Tok::Ident(w) => w.clone(),
                _ => return Err(self.unexpected(&t, "a delivery setting")),
            };
            if key != "recipients" && !seen.insert(key.clone()) {
                self.semantic(t.span, format!("duplicate `{key}` in delivery block"));
            }
            match key.as_str() {
                "mode" => {
                    let (value, vspan) = self.expect_word("`delivery` or `deployment`")?;
                    cfg.mode = match value.as_str() {
                        "delivery" => Mode::Delivery,
                        "deployment" => Mode::Deployment,
                        _ => {
                            self.semantic(vspan, format!("unknown delivery mode {value:?}"));
                            Mode::Delivery
                        }
                    };
                }
                "recipients" => {
                    let mut any = false;
                    while let Tok::Str(_) = self.peek().tok {
                        let (r, rspan) = self.expect_string("a recipient")?;
                        if r.trim().is_empty() {
                            self.semantic(rspan, "recipient must not be empty");
                        }
                        cfg.user_recipients.push(r);
                        any = true;
                    }
                    if !any {
                        let t = self.peek().clone();
                        return Err(self.unexpected(&t, "a recipient string"));
                    }
                }
                "team_webhook" | "outbox" | "distribution_endpoint" | "artifact" => {
                    let (value, vspan) = self.expect_string(&format!("a string after `{key}`"))?;
                    if value.is_empty() {
                        self.semantic(vspan, format!("`{key}` must not be empty"));
                    }
                    match key.as_str() {
                        "team_webhook" => cfg.team_webhook_url = Some(value),
                        "outbox" => cfg.outbox_dir = value,
                        "distribution_endpoint" => cfg.distribution_endpoint = Some(value),
                        _ => cfg.artifact_glob = value,
                    }
                }
                _ => return Err(self.unexpected(&t, "a delivery setting")),
            }
        }
        Ok(cfg)
    }

    fn signing(&mut self, span: Span) -> PResult<Option<SigningConfig>> {
        self.expect_lbrace()?;
        let mut fields: [Option<String>; 4] = Default::default();
        const KEYS: [&str; 4] = ["keystore", "alias", "store_password_env", "key_password_env"];
        while !self.at_block_end()? {
            let t = self.next();
            let idx = match &t.tok {
                Tok::Ident(w) => KEYS.iter().position(|k| k == w),
                _ => None,
            };
            let Some(idx) = idx else {
                return Err(self.unexpected(&t, "a signing setting"));
            };
            let (value, vspan) = self.expect_string(&format!("a string after `{}`", KEYS[idx]))?;
            if value.is_empty() {
                self.semantic(vspan, format!("`{}` must not be empty", KEYS[idx]));
            }
            if fields[idx].is_some() {
                self.semantic(t.span, format!("duplicate `{}` in signing block", KEYS[idx]));
            }
            fields[idx] = Some(value);
        }
        let missing: Vec<&str> = KEYS
            .iter()
            .zip(fields.iter())
            .filter(|(_, v)| v.is_none())
            .map(|(k, _)| *k)
            .collect();
        if !missing.is_empty() {
            self.semantic(span, format!("signing block is missing {}", missing.join(", ")));
            return Ok(None);
        }
        let [keystore, alias, store_pw, key_pw] = fields.map(Option::unwrap_or_default);
        Ok(Some(SigningConfig {
            keystore_path: keystore,
            key_alias: alias,
            store_password_env: store_pw,
            key_password_env: key_pw,
        }))
    }
}
