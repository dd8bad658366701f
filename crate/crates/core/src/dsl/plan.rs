use super::{Mode, PipelineDef, StageBody, StageDef, StepDef};

/// A stage whose steps run one after another.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerialStage {
    pub name: String,
    pub steps: Vec<StepDef>,
    pub requires_signing: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanNode {
    Serial(SerialStage),
    Parallel { name: String, branches: Vec<SerialStage> },
}

impl PlanNode {
    pub fn name(&self) -> &str {
        match self {
            PlanNode::Serial(s) => &s.name,
            PlanNode::Parallel { name, .. } => name,
        }
    }

    pub fn steps(&self) -> Box<dyn Iterator<Item = &StepDef> + '_> {
        match self {
            PlanNode::Serial(s) => Box::new(s.steps.iter()),
            PlanNode::Parallel { branches, .. } => Box::new(branches.iter().flat_map(|b| b.steps.iter())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    pub mode: Mode,
    pub nodes: Vec<PlanNode>,
}

fn serial(stage: &StageDef) -> SerialStage {
    let steps = match &stage.body {
        StageBody::Steps(steps) => steps.clone(),
        StageBody::Parallel(_) => Vec::new(),
    };
    SerialStage {
        name: stage.name.clone(),
        steps,
        requires_signing: stage.requires_signing,
    }
}

/// Flattens a validated pipeline into execution order, dropping stages
/// whose `when_mode` excludes the pipeline's mode.
pub fn plan(def: &PipelineDef) -> ExecutionPlan {
    plan_for_mode(def, def.delivery.mode)
}

/// Like [`plan`], for a mode other than the configured one.
pub fn plan_for_mode(def: &PipelineDef, mode: Mode) -> ExecutionPlan {
    let nodes = def
        .stages
        .iter()
        .filter(|s| s.when_mode.admits(mode))
        .map(|stage| match &stage.body {
            StageBody::Steps(_) => PlanNode::Serial(serial(stage)),
            StageBody::Parallel(branches) => PlanNode::Parallel {
                name: stage.name.clone(),
                branches: branches.iter().map(serial).collect(),
            },
        })
        .collect();
    ExecutionPlan { mode, nodes }
}
