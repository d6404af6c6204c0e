//! A small match-action pipeline model: a JSON-serializable stage program,
//! a verifier for register-access legality, and an interpreter.
//!
//! Access rules checked by [`check`]:
//! - a register array is touched in one stage only, at most once per packet;
//! - a stage never touches an array placed in an earlier stage;
//! - a stage touches at most one array.
//!
//! Interpreter semantics, per packet: metadata starts at its declared
//! initial values; stages run in order and a stage whose `when` condition is
//! false is skipped. A register op reads the cell at its index (`cell`),
//! writes `update` if the op writes and its `guard` holds (`new_cell` is the
//! stored value afterwards), then applies its metadata assignments in order.
//! An index outside the array makes the op a no-op. Arithmetic saturates.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::hashing::{FlowKey, LayerHasher};
use crate::sketch::Layout;

pub const PROGRAM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PipelineError {
    #[error("malformed program: {0}")]
    MalformedProgram(String),
    #[error("program is infeasible: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Infeasible(Vec<Violation>),
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, PipelineError> {
    Err(PipelineError::MalformedProgram(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageProgram {
    pub format_version: u32,
    pub name: String,
    pub registers: Vec<Register>,
    #[serde(default)]
    pub metadata: Vec<MetaDecl>,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub name: String,
    pub kind: RegisterKind,
    /// Stage the array is placed in, when fixed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegisterKind {
    /// Takes its size and counter width from sketch layer `layer`.
    Layer { layer: usize },
    Plain { size: usize, bits: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaDecl {
    pub name: String,
    #[serde(default)]
    pub init: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Stage {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<Cond>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ops: Vec<RegisterOp>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sets: Vec<MetaAssign>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterOp {
    pub array: ArrayRef,
    pub index: IndexExpr,
    pub access: Access,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<Cond>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<MetaAssign>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayRef {
    Fixed(String),
    /// The array `choices[meta]`, picked per packet.
    ByMeta { meta: String, choices: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexExpr {
    /// Hash of the flow key for the accessed array's sketch layer.
    Hash,
    /// Metadata value plus a signed offset.
    Meta { name: String, offset: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    Read,
    Write,
    ReadModifyWrite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Const(u64),
    Meta(String),
    Cell,
    NewCell,
    /// Largest value of the accessed array.
    Limit,
    Add(Box<Value>, Box<Value>),
    Min(Box<Value>, Box<Value>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cond {
    Lt(Value, Value),
    Le(Value, Value),
    Eq(Value, Value),
    And(Vec<Cond>),
    Or(Vec<Cond>),
    Not(Box<Cond>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaAssign {
    pub target: String,
    pub value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<Cond>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    DoubleAccess,
    BackEdge,
    MultiAccessInStage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Earlier stage first, offending stage last.
    pub stages: Vec<usize>,
    pub array: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (first, last) = (self.stages[0], self.stages[self.stages.len() - 1]);
        match self.kind {
            ViolationKind::DoubleAccess => write!(
                f,
                "DoubleAccess: stage {last} accesses {} already accessed in stage {first}",
                self.array
            ),
            ViolationKind::BackEdge => write!(
                f,
                "BackEdge: stage {last} accesses {} placed in earlier stage {first}",
                self.array
            ),
            ViolationKind::MultiAccessInStage => {
                write!(f, "MultiAccessInStage: stage {last} accesses {} after another array", self.array)
            }
        }
    }
}

impl StageProgram {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let p: StageProgram =
            serde_json::from_str(text).map_err(|e| PipelineError::MalformedProgram(e.to_string()))?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    fn register(&self, name: &str) -> Option<&Register> {
        self.registers.iter().find(|r| r.name == name)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.format_version != PROGRAM_FORMAT_VERSION {
            return malformed(format!("unsupported format_version {}", self.format_version));
        }
        let mut names = HashMap::new();
        for r in &self.registers {
            if r.name.is_empty() {
                return malformed("register with an empty name");
            }
            if names.insert(r.name.as_str(), ()).is_some() {
                return malformed(format!("register {} declared twice", r.name));
            }
            if let RegisterKind::Plain { bits, .. } = r.kind {
                if !(1..=64).contains(&bits) {
                    return malformed(format!("register {} has {bits}-bit cells", r.name));
                }
            }
        }
        let mut metas = HashMap::new();
        for m in &self.metadata {
            if m.name.is_empty() {
                return malformed("metadata field with an empty name");
            }
            if metas.insert(m.name.as_str(), ()).is_some() {
                return malformed(format!("metadata {} declared twice", m.name));
            }
        }
        let meta_ok = |n: &str| -> Result<(), PipelineError> {
            if metas.contains_key(n) {
                Ok(())
            } else {
                malformed(format!("unknown metadata {n:?}"))
            }
        };
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(c) = &stage.when {
                c.visit_values(&mut |v| v.check(&meta_ok, false))?;
            }
            for a in &stage.sets {
                meta_ok(&a.target)?;
                a.value.check(&meta_ok, false)?;
                if let Some(c) = &a.when {
                    c.visit_values(&mut |v| v.check(&meta_ok, false))?;
                }
            }
            for op in &stage.ops {
                let arrays = match &op.array {
                    ArrayRef::Fixed(n) => vec![n.as_str()],
                    ArrayRef::ByMeta { meta, choices } => {
                        meta_ok(meta)?;
                        if choices.is_empty() {
                            return malformed(format!("stage {s}: array choice list is empty"));
                        }
                        choices.iter().map(String::as_str).collect()
                    }
                };
                for n in arrays {
                    let Some(r) = self.register(n) else {
                        return malformed(format!("stage {s}: unknown register {n:?}"));
                    };
                    if matches!(op.index, IndexExpr::Hash) && matches!(r.kind, RegisterKind::Plain { .. }) {
                        return malformed(format!("stage {s}: register {n} has no sketch layer to hash into"));
                    }
                    if let Some(p) = r.stage {
                        if p > s {
                            return malformed(format!("stage {s}: register {n} is placed in later stage {p}"));
                        }
                    }
                }
                if let IndexExpr::Meta { name, .. } = &op.index {
                    meta_ok(name)?;
                }
                if op.access != Access::Read && op.update.is_none() {
                    return malformed(format!("stage {s}: writing op without an update value"));
                }
                if let Some(c) = &op.guard {
                    c.visit_values(&mut |v| v.check(&meta_ok, true))?;
                }
                if let Some(u) = &op.update {
                    u.check(&meta_ok, true)?;
                }
                for a in &op.outputs {
                    meta_ok(&a.target)?;
                    a.value.check(&meta_ok, true)?;
                    if let Some(c) = &a.when {
                        c.visit_values(&mut |v| v.check(&meta_ok, true))?;
                    }
                }
            }
        }
        Ok(())
    }
}

impl Value {
    fn check(&self, meta_ok: &dyn Fn(&str) -> Result<(), PipelineError>, in_op: bool) -> Result<(), PipelineError> {
        match self {
            Value::Const(_) => Ok(()),
            Value::Meta(n) => meta_ok(n),
            Value::Cell | Value::NewCell | Value::Limit if !in_op => {
                malformed("cell values are only available inside a register op")
            }
            Value::Cell | Value::NewCell | Value::Limit => Ok(()),
            Value::Add(a, b) | Value::Min(a, b) => {
                a.check(meta_ok, in_op)?;
                b.check(meta_ok, in_op)
            }
        }
    }
}

impl Cond {
    fn visit_values(
        &self,
        f: &mut dyn FnMut(&Value) -> Result<(), PipelineError>,
    ) -> Result<(), PipelineError> {
        match self {
            Cond::Lt(a, b) | Cond::Le(a, b) | Cond::Eq(a, b) => {
                f(a)?;
                f(b)
            }
            Cond::And(cs) | Cond::Or(cs) => cs.iter().try_for_each(|c| c.visit_values(f)),
            Cond::Not(c) => c.visit_values(f),
        }
    }
}

/// Access-legality violations of `program`; empty means feasible.
pub fn check(program: &StageProgram) -> Result<Vec<Violation>, PipelineError> {
    program.validate()?;
    let mut out = Vec::new();
    let mut first_access: HashMap<&str, usize> = HashMap::new();
    for (s, stage) in program.stages.iter().enumerate() {
        let mut touched_here: Vec<String> = Vec::new();
        for op in &stage.ops {
            let arrays: Vec<&str> = match &op.array {
                ArrayRef::Fixed(n) => vec![n.as_str()],
                ArrayRef::ByMeta { choices, .. } => choices.iter().map(String::as_str).collect(),
            };
            let label = arrays.join("|");
            if !touched_here.is_empty() {
                out.push(Violation {
                    kind: ViolationKind::MultiAccessInStage,
                    stages: vec![s],
                    array: label.clone(),
                });
            }
            touched_here.push(label.clone());

            let earlier = arrays
                .iter()
                .filter_map(|a| first_access.get(a).copied().filter(|&f| f < s))
                .min();
            let placed = arrays
                .iter()
                .filter_map(|a| program.register(a).and_then(|r| r.stage).filter(|&p| p < s))
                .min();
            if let Some(f) = earlier {
                out.push(Violation {
                    kind: ViolationKind::DoubleAccess,
                    stages: vec![f, s],
                    array: label,
                });
            } else if let Some(p) = placed {
                out.push(Violation {
                    kind: ViolationKind::BackEdge,
                    stages: vec![p, s],
                    array: label,
                });
            }
            for a in arrays {
                first_access.entry(a).or_insert(s);
            }
        }
    }
    Ok(out)
}

/// Register contents after running the program over `keys`.
pub type RegisterFile = BTreeMap<String, Vec<u64>>;

struct Runtime<'a, H> {
    program: &'a StageProgram,
    layout: &'a Layout,
    hasher: &'a H,
    limits: HashMap<&'a str, u64>,
    sizes: HashMap<&'a str, usize>,
    layer_of: HashMap<&'a str, usize>,
    regs: HashMap<&'a str, Vec<u64>>,
}

struct OpCtx {
    cell: u64,
    new_cell: u64,
    limit: u64,
}

fn limit_of(bits: u32) -> u64 {
    if bits == 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

impl<'a, H: LayerHasher> Runtime<'a, H> {
    fn new(program: &'a StageProgram, layout: &'a Layout, hasher: &'a H) -> Result<Self, PipelineError> {
        let mut rt = Runtime {
            program,
            layout,
            hasher,
            limits: HashMap::new(),
            sizes: HashMap::new(),
            layer_of: HashMap::new(),
            regs: HashMap::new(),
        };
        for r in &program.registers {
            let (size, bits) = match r.kind {
                RegisterKind::Layer { layer } => {
                    if layer >= layout.layers() {
                        return malformed(format!(
                            "register {} bound to layer {layer} of a {}-layer layout",
                            r.name,
                            layout.layers()
                        ));
                    }
                    rt.layer_of.insert(&r.name, layer);
                    (layout.widths[layer], layout.bits[layer])
                }
                RegisterKind::Plain { size, bits } => (size, bits),
            };
            rt.limits.insert(&r.name, limit_of(bits));
            rt.sizes.insert(&r.name, size);
            rt.regs.insert(&r.name, vec![0; size]);
        }
        Ok(rt)
    }

    fn packet(&mut self, key: &FlowKey) -> Result<(), PipelineError> {
        let program = self.program;
        let mut meta: HashMap<&str, u64> =
            program.metadata.iter().map(|m| (m.name.as_str(), m.init)).collect();
        for stage in &program.stages {
            if let Some(c) = &stage.when {
                if !eval_cond(c, &meta, None) {
                    continue;
                }
            }
            for op in &stage.ops {
                self.run_op(op, key, &mut meta)?;
            }
            for a in &stage.sets {
                assign(a, &mut meta, None);
            }
        }
        Ok(())
    }

    fn run_op(&mut self, op: &'a RegisterOp, key: &FlowKey, meta: &mut HashMap<&'a str, u64>) -> Result<(), PipelineError> {
        let name: &str = match &op.array {
            ArrayRef::Fixed(n) => n,
            ArrayRef::ByMeta { meta: m, choices } => {
                let i = meta[m.as_str()] as usize;
                match choices.get(i) {
                    Some(n) => n,
                    None => return Ok(()),
                }
            }
        };
        let (&name, &size) = self.sizes.get_key_value(name).expect("validated register");
        let index = match &op.index {
            IndexExpr::Hash => {
                let layer = self.layer_of[name];
                Some(self.hasher.index(key, layer, self.layout.widths[layer]))
            }
            IndexExpr::Meta { name: m, offset } => {
                let v = meta[m.as_str()] as i128 + *offset as i128;
                (0..size as i128).contains(&v).then_some(v as usize)
            }
        };
        let Some(index) = index else {
            return Ok(());
        };
        let limit = self.limits[name];
        let cell = self.regs[name][index];
        let mut ctx = OpCtx {
            cell,
            new_cell: cell,
            limit,
        };
        if op.access != Access::Read && op.guard.as_ref().is_none_or(|g| eval_cond(g, meta, Some(&ctx))) {
            let v = eval(op.update.as_ref().expect("validated update"), meta, Some(&ctx));
            if v > limit {
                return malformed(format!("update writes {v} into {name} whose limit is {limit}"));
            }
            self.regs.get_mut(name).expect("register")[index] = v;
            ctx.new_cell = v;
        }
        for a in &op.outputs {
            assign(a, meta, Some(&ctx));
        }
        Ok(())
    }
}

fn assign<'a>(a: &'a MetaAssign, meta: &mut HashMap<&'a str, u64>, ctx: Option<&OpCtx>) {
    if a.when.as_ref().is_none_or(|c| eval_cond(c, meta, ctx)) {
        let v = eval(&a.value, meta, ctx);
        meta.insert(a.target.as_str(), v);
    }
}

fn eval(v: &Value, meta: &HashMap<&str, u64>, ctx: Option<&OpCtx>) -> u64 {
    match v {
        Value::Const(c) => *c,
        Value::Meta(n) => meta[n.as_str()],
        Value::Cell => ctx.expect("validated").cell,
        Value::NewCell => ctx.expect("validated").new_cell,
        Value::Limit => ctx.expect("validated").limit,
        Value::Add(a, b) => eval(a, meta, ctx).saturating_add(eval(b, meta, ctx)),
        Value::Min(a, b) => eval(a, meta, ctx).min(eval(b, meta, ctx)),
    }
}

fn eval_cond(c: &Cond, meta: &HashMap<&str, u64>, ctx: Option<&OpCtx>) -> bool {
    match c {
        Cond::Lt(a, b) => eval(a, meta, ctx) < eval(b, meta, ctx),
        Cond::Le(a, b) => eval(a, meta, ctx) <= eval(b, meta, ctx),
        Cond::Eq(a, b) => eval(a, meta, ctx) == eval(b, meta, ctx),
        Cond::And(cs) => cs.iter().all(|c| eval_cond(c, meta, ctx)),
        Cond::Or(cs) => cs.iter().any(|c| eval_cond(c, meta, ctx)),
        Cond::Not(c) => !eval_cond(c, meta, ctx),
    }
}

/// Runs a feasible program over `keys`; layer-bound registers take their
/// shape from `layout` and their indices from `hasher`.
pub fn interpret<H: LayerHasher>(
    program: &StageProgram,
    keys: impl IntoIterator<Item = impl Borrow<FlowKey>>,
    layout: &Layout,
    hasher: &H,
) -> Result<RegisterFile, PipelineError> {
    let violations = check(program)?;
    if !violations.is_empty() {
        return Err(PipelineError::Infeasible(violations));
    }
    let mut rt = Runtime::new(program, layout, hasher)?;
    for key in keys {
        rt.packet(key.borrow())?;
    }
    Ok(rt.regs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// Ready-made programs for the sketch update rules.
pub mod canned {
    use super::*;

    fn layer_name(l: usize) -> String {
        format!("layer{l}")
    }

    fn layer_registers(d: usize) -> Vec<Register> {
        (0..d)
            .map(|l| Register {
                name: layer_name(l),
                kind: RegisterKind::Layer { layer: l },
                stage: Some(l),
            })
            .collect()
    }

    fn meta(name: &str, init: u64) -> MetaDecl {
        MetaDecl {
            name: name.into(),
            init,
        }
    }

    fn m(name: &str) -> Value {
        Value::Meta(name.into())
    }

    fn plus_one(v: Value) -> Value {
        Value::Add(Box::new(v), Box::new(Value::Const(1)))
    }

    fn unsaturated(v: Value) -> Cond {
        Cond::Lt(v, Value::Limit)
    }

    /// Running estimate after an op: the smaller of itself and the stored
    /// cell, skipping saturated cells below the top layer.
    fn track_estimate(l: usize, d: usize) -> MetaAssign {
        MetaAssign {
            target: "estimate".into(),
            value: Value::Min(Box::new(m("estimate")), Box::new(Value::NewCell)),
            when: (l + 1 < d).then(|| unsaturated(Value::NewCell)),
        }
    }

    fn program(name: &str, d: usize, metadata: Vec<MetaDecl>, stages: Vec<Stage>) -> StageProgram {
        StageProgram {
            format_version: PROGRAM_FORMAT_VERSION,
            name: name.into(),
            registers: layer_registers(d),
            metadata,
            stages,
        }
    }

    /// Minimum update: one read-modify-write per layer, the running
    /// minimum carried forward in metadata.
    pub fn minimum_update(d: usize) -> StageProgram {
        let stages = (0..d)
            .map(|l| {
                let guard = Cond::And(vec![unsaturated(Value::Cell), Cond::Lt(Value::Cell, m("min"))]);
                Stage {
                    label: format!("layer {l}"),
                    when: None,
                    ops: vec![RegisterOp {
                        array: ArrayRef::Fixed(layer_name(l)),
                        index: IndexExpr::Hash,
                        access: Access::ReadModifyWrite,
                        guard: Some(guard.clone()),
                        update: Some(plus_one(Value::Cell)),
                        outputs: vec![
                            MetaAssign {
                                target: "min".into(),
                                value: Value::NewCell,
                                when: Some(guard),
                            },
                            track_estimate(l, d),
                        ],
                    }],
                    sets: vec![],
                }
            })
            .collect();
        program(
            "minimum-update",
            d,
            vec![meta("min", u64::MAX), meta("estimate", u64::MAX)],
            stages,
        )
    }

    /// Count-Min across layers: every unsaturated counter is incremented.
    pub fn count_min(d: usize) -> StageProgram {
        let stages = (0..d)
            .map(|l| Stage {
                label: format!("layer {l}"),
                when: None,
                ops: vec![RegisterOp {
                    array: ArrayRef::Fixed(layer_name(l)),
                    index: IndexExpr::Hash,
                    access: Access::ReadModifyWrite,
                    guard: Some(unsaturated(Value::Cell)),
                    update: Some(plus_one(Value::Cell)),
                    outputs: vec![track_estimate(l, d)],
                }],
                sets: vec![],
            })
            .collect();
        program("count-min", d, vec![meta("estimate", u64::MAX)], stages)
    }

    /// Cascade: the first unsaturated layer counts, later stages are skipped.
    pub fn cascade(d: usize) -> StageProgram {
        let stages = (0..d)
            .map(|l| Stage {
                label: format!("layer {l}"),
                when: Some(Cond::Eq(m("done"), Value::Const(0))),
                ops: vec![RegisterOp {
                    array: ArrayRef::Fixed(layer_name(l)),
                    index: IndexExpr::Hash,
                    access: Access::ReadModifyWrite,
                    guard: Some(unsaturated(Value::Cell)),
                    update: Some(plus_one(Value::Cell)),
                    outputs: vec![MetaAssign {
                        target: "done".into(),
                        value: Value::Const(1),
                        when: Some(unsaturated(Value::Cell)),
                    }],
                }],
                sets: vec![],
            })
            .collect();
        program("cascade", d, vec![meta("done", 0)], stages)
    }

    /// Conservative update: the minimum is only known after reading every
    /// layer, so a final stage must go back to the layer holding it.
    pub fn conservative_update(d: usize) -> StageProgram {
        let mut stages: Vec<Stage> = (0..d)
            .map(|l| {
                let better = Cond::And(vec![unsaturated(Value::Cell), Cond::Lt(Value::Cell, m("min"))]);
                Stage {
                    label: format!("read layer {l}"),
                    when: None,
                    ops: vec![RegisterOp {
                        array: ArrayRef::Fixed(layer_name(l)),
                        index: IndexExpr::Hash,
                        access: Access::Read,
                        guard: None,
                        update: None,
                        outputs: vec![
                            MetaAssign {
                                target: "min".into(),
                                value: Value::Cell,
                                when: Some(better.clone()),
                            },
                            MetaAssign {
                                target: "argmin".into(),
                                value: Value::Const(l as u64),
                                when: Some(better),
                            },
                        ],
                    }],
                    sets: vec![],
                }
            })
            .collect();
        stages.push(Stage {
            label: "write back minimum".into(),
            when: None,
            ops: vec![RegisterOp {
                array: ArrayRef::ByMeta {
                    meta: "argmin".into(),
                    choices: (0..d).map(layer_name).collect(),
                },
                index: IndexExpr::Hash,
                access: Access::ReadModifyWrite,
                guard: Some(unsaturated(Value::Cell)),
                update: Some(plus_one(Value::Cell)),
                outputs: vec![],
            }],
            sets: vec![],
        });
        program(
            "conservative-update",
            d,
            vec![meta("min", u64::MAX), meta("argmin", d as u64)],
            stages,
        )
    }

    fn distribution_op(array: &str, offset: i64) -> RegisterOp {
        RegisterOp {
            array: ArrayRef::Fixed(array.into()),
            index: IndexExpr::Meta {
                name: "estimate".into(),
                offset,
            },
            access: Access::ReadModifyWrite,
            guard: Some(unsaturated(Value::Cell)),
            update: Some(plus_one(Value::Cell)),
            outputs: vec![],
        }
    }

    /// Minimum update followed by the flow-size distribution update. With
    /// `split` the increments and decrements live in two arrays; without it
    /// one array is visited twice.
    pub fn minimum_update_with_distribution(d: usize, max_size: usize, split: bool) -> StageProgram {
        let mut p = minimum_update(d);
        p.name = if split {
            "minimum-update-distribution".into()
        } else {
            "minimum-update-distribution-single-array".into()
        };
        let (inc, dec) = if split { ("dist_inc", "dist_dec") } else { ("dist", "dist") };
        p.registers.push(Register {
            name: inc.into(),
            kind: RegisterKind::Plain {
                size: max_size + 1,
                bits: 32,
            },
            stage: None,
        });
        if split {
            p.registers.push(Register {
                name: dec.into(),
                kind: RegisterKind::Plain {
                    size: max_size + 1,
                    bits: 32,
                },
                stage: None,
            });
        }
        p.stages.push(Stage {
            label: "count new size".into(),
            ops: vec![distribution_op(inc, 0)],
            ..Stage::default()
        });
        p.stages.push(Stage {
            label: "retire old size".into(),
            ops: vec![distribution_op(dec, -1)],
            ..Stage::default()
        });
        p
    }

    /// Every canned program for `d` layers, keyed by file stem.
    pub fn all(d: usize) -> Vec<(&'static str, StageProgram)> {
        vec![
            ("mu", minimum_update(d)),
            ("cm", count_min(d)),
            ("cascade", cascade(d)),
            ("cu", conservative_update(d)),
            ("distribution_split", minimum_update_with_distribution(d, 255, true)),
            ("distribution_single", minimum_update_with_distribution(d, 255, false)),
        ]
    }
}
