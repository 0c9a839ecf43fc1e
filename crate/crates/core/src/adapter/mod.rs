//! Cross-modal fusion adapters.
//!
//! Every variant implements [`FusionAdapter`] and is selected by name from an
//! [`AdapterRegistry`]: `gated` is the full adapter, `ungated` drops the gate
//! projections, `none` is the identity used by adapter-free baselines.
//!
//! The gated branch computes
//! `out = x + (silu(x·W_down) ⊙ (x·W_gate))·W_up`; the ungated branch
//! computes `out = x + silu(x·W_down)·W_up`. Image and text branches own
//! their down/gate projections and share one up-projection, stored once as
//! `adapter.shared.up`.

pub mod accounting;
mod assemble;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use crome_autodiff::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CromeError, Result};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::session::Session;

pub use assemble::assemble_llm_input;

pub const SHARED_UP: &str = "adapter.shared.up";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Image,
    Text,
}

impl Branch {
    fn tag(self) -> &'static str {
        match self {
            Branch::Image => "img",
            Branch::Text => "txt",
        }
    }

    pub fn down_name(self) -> String {
        format!("adapter.{}.down", self.tag())
    }

    pub fn gate_name(self) -> String {
        format!("adapter.{}.gate", self.tag())
    }
}

impl FromStr for Branch {
    type Err = CromeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" | "img" => Ok(Branch::Image),
            "text" | "txt" => Ok(Branch::Text),
            other => Err(CromeError::Contract(format!("unknown adapter branch {other:?}"))),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Image => "image",
            Branch::Text => "text",
        })
    }
}

pub trait FusionAdapter: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Parameters this variant owns for width `d` and bottleneck `m`.
    fn param_specs(&self, d: usize, m: usize, init_std: f64) -> Vec<ParamSpec>;

    fn apply(&self, s: &mut Session, branch: Branch, x: Var) -> Result<Var>;

    /// Counted from the declared parameters, not from a closed form.
    fn param_count(&self, d: usize, m: usize) -> usize {
        self.param_specs(d, m, 0.0).iter().map(ParamSpec::numel).sum()
    }
}

/// `x + (silu(x W_d) ⊙ x W_g) W_u`
#[derive(Debug, Default)]
pub struct GatedAdapter;

/// `x + silu(x W_d) W_u`
#[derive(Debug, Default)]
pub struct UngatedAdapter;

/// Identity; owns no parameters.
#[derive(Debug, Default)]
pub struct NoAdapter;

fn branch_specs(d: usize, m: usize, std: f64, gated: bool) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    for b in [Branch::Image, Branch::Text] {
        v.push(ParamSpec::new(b.down_name(), &[d, m], Init::Normal(std)));
        if gated {
            v.push(ParamSpec::new(b.gate_name(), &[d, m], Init::Normal(std)));
        }
    }
    // zero up-projection: the adapter starts as the identity map
    v.push(ParamSpec::new(SHARED_UP, &[m, d], Init::Zeros));
    v
}

fn residual_up(s: &mut Session, x: Var, z: Var) -> Result<Var> {
    let up = s.param(SHARED_UP)?;
    let delta = s.graph.matmul(z, up)?;
    Ok(s.graph.add(x, delta)?)
}

impl FusionAdapter for GatedAdapter {
    fn name(&self) -> &'static str {
        "gated"
    }

    fn param_specs(&self, d: usize, m: usize, init_std: f64) -> Vec<ParamSpec> {
        branch_specs(d, m, init_std, true)
    }

    fn apply(&self, s: &mut Session, branch: Branch, x: Var) -> Result<Var> {
        let w_down = s.param(&branch.down_name())?;
        let w_gate = s.param(&branch.gate_name())?;
        let h = s.graph.matmul(x, w_down)?;
        let act = s.graph.silu(h);
        let gate = s.graph.matmul(x, w_gate)?;
        let z = s.graph.mul(act, gate)?;
        residual_up(s, x, z)
    }
}

impl FusionAdapter for UngatedAdapter {
    fn name(&self) -> &'static str {
        "ungated"
    }

    fn param_specs(&self, d: usize, m: usize, init_std: f64) -> Vec<ParamSpec> {
        branch_specs(d, m, init_std, false)
    }

    fn apply(&self, s: &mut Session, branch: Branch, x: Var) -> Result<Var> {
        let w_down = s.param(&branch.down_name())?;
        let h = s.graph.matmul(x, w_down)?;
        let z = s.graph.silu(h);
        residual_up(s, x, z)
    }
}

impl FusionAdapter for NoAdapter {
    fn name(&self) -> &'static str {
        "none"
    }

    fn param_specs(&self, _d: usize, _m: usize, _init_std: f64) -> Vec<ParamSpec> {
        Vec::new()
    }

    fn apply(&self, _s: &mut Session, _branch: Branch, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Named collection of adapter strategies.
#[derive(Debug)]
pub struct AdapterRegistry {
    entries: BTreeMap<&'static str, Box<dyn FusionAdapter>>,
}

impl AdapterRegistry {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(GatedAdapter));
        r.register(Box::new(UngatedAdapter));
        r.register(Box::new(NoAdapter));
        r
    }

    pub fn register(&mut self, adapter: Box<dyn FusionAdapter>) {
        self.entries.insert(adapter.name(), adapter);
    }

    pub fn get(&self, name: &str) -> Result<&dyn FusionAdapter> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            CromeError::Config(format!(
                "unknown adapter kind {name:?}; registered: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

/// Process-wide registry holding the built-in strategies.
pub fn registry() -> &'static AdapterRegistry {
    static REGISTRY: OnceLock<AdapterRegistry> = OnceLock::new();
    REGISTRY.get_or_init(AdapterRegistry::builtin)
}

/// Standalone adapter weights. `W_up` is a single matrix used by both
/// branches; gate matrices are absent, not zero, for the ungated variant.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub img_down: Tensor,
    pub img_gate: Option<Tensor>,
    pub txt_down: Tensor,
    pub txt_gate: Option<Tensor>,
    pub shared_up: Tensor,
}

impl AdapterParams {
    pub fn gated(&self) -> bool {
        self.img_gate.is_some()
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| store.require(n).cloned();
        let opt = |n: String| store.get(&n).cloned();
        let p = Self {
            img_down: get("adapter.img.down")?,
            img_gate: opt(Branch::Image.gate_name()),
            txt_down: get("adapter.txt.down")?,
            txt_gate: opt(Branch::Text.gate_name()),
            shared_up: get(SHARED_UP)?,
        };
        if p.img_gate.is_some() != p.txt_gate.is_some() {
            return Err(CromeError::Contract("gate present on only one branch".into()));
        }
        Ok(p)
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("adapter.img.down", self.img_down.clone());
        s.insert("adapter.txt.down", self.txt_down.clone());
        if let Some(g) = &self.img_gate {
            s.insert(Branch::Image.gate_name(), g.clone());
        }
        if let Some(g) = &self.txt_gate {
            s.insert(Branch::Text.gate_name(), g.clone());
        }
        s.insert(SHARED_UP, self.shared_up.clone());
        s
    }

    pub fn param_count(&self) -> usize {
        self.to_store().numel_where(|_| true)
    }
}

/// Evaluates one adapter branch on `x: [n, d]` outside any training graph.
pub fn adapter_branch(x: &Tensor, branch: Branch, params: &AdapterParams) -> Result<Tensor> {
    let d = params.shared_up.cols();
    if x.cols() != d {
        return Err(crome_autodiff::AutodiffError::Shape {
            op: "adapter_branch",
            lhs: x.shape().to_vec(),
            rhs: params.img_down.shape().to_vec(),
        }
        .into());
    }
    let store = params.to_store();
    let mut s = Session::frozen(&store);
    let xv = s.graph.constant(x.clone());
    let adapter: &dyn FusionAdapter = if params.gated() { &GatedAdapter } else { &UngatedAdapter };
    let out = adapter.apply(&mut s, branch, xv)?;
    Ok(s.graph.value(out).clone())
}
