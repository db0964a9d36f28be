//! Instruction sequences, the threads they produce, and the operators that
//! evaluate threads against services.
//!
//! A program is a `;`-separated list over five instruction forms:
//!
//! | token   | instruction                                              |
//! |---------|----------------------------------------------------------|
//! | `f.m`   | basic: perform `m` at focus `f`, continue                |
//! | `+f.m`  | positive test: continue on `true`, skip one on `false`   |
//! | `-f.m`  | negative test: continue on `false`, skip one on `true`   |
//! | `#k`    | jump to the k-th next instruction (`#0` deadlocks)       |
//! | `!`     | halt                                                     |
//!
//! Threads are kept as finite graphs of [`Node`]s, so a [`Thread`] is a
//! regular (possibly cyclic) binary-branching behavior. Two threads are
//! compared with [`Thread::same_behavior`], which is structural equality of
//! the unfolded trees and therefore ignores state naming.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KernelError {
    #[error("syntax error at instruction {position}: unrecognized token `{token}`")]
    Syntax { position: usize, token: String },
    #[error("program contains no instructions")]
    EmptyProgram,
    #[error("budget of {0} steps exceeded")]
    BudgetExceeded(usize),
    #[error("no service for focus `{0}`")]
    UnservedFocus(String),
    #[error("more than one service for focus `{0}`")]
    AmbiguousFocus(String),
    #[error("state {0} does not exist")]
    InvalidState(StateId),
}

/// A method call at a focus, written `focus.method`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub focus: String,
    pub method: String,
}

impl Action {
    pub fn new(focus: impl Into<String>, method: impl Into<String>) -> Self {
        Self {
            focus: focus.into(),
            method: method.into(),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.focus, self.method)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Instruction {
    Basic(Action),
    PositiveTest(Action),
    NegativeTest(Action),
    Jump(usize),
    Halt,
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::Basic(a) => write!(f, "{a}"),
            Instruction::PositiveTest(a) => write!(f, "+{a}"),
            Instruction::NegativeTest(a) => write!(f, "-{a}"),
            Instruction::Jump(k) => write!(f, "#{k}"),
            Instruction::Halt => f.write_str("!"),
        }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_action(s: &str) -> Option<Action> {
    let (focus, method) = s.split_once('.')?;
    (is_identifier(focus) && is_identifier(method)).then(|| Action::new(focus, method))
}

fn parse_token(token: &str) -> Option<Instruction> {
    if token == "!" {
        return Some(Instruction::Halt);
    }
    if let Some(rest) = token.strip_prefix('#') {
        if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        return rest.parse().ok().map(Instruction::Jump);
    }
    if let Some(rest) = token.strip_prefix('+') {
        return parse_action(rest).map(Instruction::PositiveTest);
    }
    if let Some(rest) = token.strip_prefix('-') {
        return parse_action(rest).map(Instruction::NegativeTest);
    }
    parse_action(token).map(Instruction::Basic)
}

/// A non-empty program. Positions are numbered from 1 in error reports.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InstructionSequence(Vec<Instruction>);

impl InstructionSequence {
    pub fn new(instructions: Vec<Instruction>) -> Result<Self, KernelError> {
        if instructions.is_empty() {
            return Err(KernelError::EmptyProgram);
        }
        Ok(Self(instructions))
    }

    /// Parses `;`-separated tokens. A single trailing `;` is tolerated.
    pub fn parse(text: &str) -> Result<Self, KernelError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(KernelError::EmptyProgram);
        }
        let body = trimmed.strip_suffix(';').unwrap_or(trimmed);
        let mut instructions = Vec::new();
        for (idx, raw) in body.split(';').enumerate() {
            let token = raw.trim();
            let ins = parse_token(token).ok_or_else(|| KernelError::Syntax {
                position: idx + 1,
                token: token.to_string(),
            })?;
            instructions.push(ins);
        }
        Self::new(instructions)
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromStr for InstructionSequence {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl fmt::Display for InstructionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, ins) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{ins}")?;
        }
        Ok(())
    }
}

pub type StateId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Node {
    Stop,
    Deadlock,
    PostCond {
        action: Action,
        then: StateId,
        otherwise: StateId,
    },
}

/// How a thread or a trace ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum End {
    Stop,
    Deadlock,
}

impl fmt::Display for End {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            End::Stop => "stop",
            End::Deadlock => "deadlock",
        })
    }
}

/// A regular thread: a finite system of equations `state = node` with a
/// designated root state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Thread {
    nodes: Vec<Node>,
    root: StateId,
}

impl Thread {
    /// Builds a thread from explicit equations, checking every reference.
    pub fn from_equations(nodes: Vec<Node>, root: StateId) -> Result<Self, KernelError> {
        let n = nodes.len();
        if root >= n {
            return Err(KernelError::InvalidState(root));
        }
        for node in &nodes {
            if let Node::PostCond {
                then, otherwise, ..
            } = node
            {
                for &s in [then, otherwise] {
                    if s >= n {
                        return Err(KernelError::InvalidState(s));
                    }
                }
            }
        }
        Ok(Self { nodes, root })
    }

    pub fn stop() -> Self {
        Self {
            nodes: vec![Node::Stop],
            root: 0,
        }
    }

    pub fn deadlock() -> Self {
        Self {
            nodes: vec![Node::Deadlock],
            root: 0,
        }
    }

    /// `action ∘ (then ⊴ otherwise)`: perform `action`, continue with `then`
    /// on reply `true` and with `otherwise` on `false`.
    pub fn post_cond(action: Action, then: Thread, otherwise: Thread) -> Self {
        let then_len = then.nodes.len();
        let mut nodes = Vec::with_capacity(1 + then_len + otherwise.nodes.len());
        nodes.push(Node::PostCond {
            action,
            then: 1 + then.root,
            otherwise: 1 + then_len + otherwise.root,
        });
        nodes.extend(then.nodes.into_iter().map(|n| shift(n, 1)));
        nodes.extend(otherwise.nodes.into_iter().map(|n| shift(n, 1 + then_len)));
        Self { nodes, root: 0 }
    }

    /// `a1 ∘ a2 ∘ … ∘ end`, a thread without branching.
    pub fn action_prefix(actions: impl IntoIterator<Item = Action>, end: End) -> Self {
        let tail = match end {
            End::Stop => Thread::stop(),
            End::Deadlock => Thread::deadlock(),
        };
        let actions: Vec<Action> = actions.into_iter().collect();
        actions.into_iter().rev().fold(tail, |acc, a| {
            let mut nodes = Vec::with_capacity(acc.nodes.len() + 1);
            nodes.push(Node::PostCond {
                action: a,
                then: acc.root + 1,
                otherwise: acc.root + 1,
            });
            nodes.extend(acc.nodes.into_iter().map(|n| shift(n, 1)));
            Thread { nodes, root: 0 }
        })
    }

    pub fn root(&self) -> StateId {
        self.root
    }

    pub fn node(&self, id: StateId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root_node(&self) -> &Node {
        &self.nodes[self.root]
    }

    /// States reachable from the root, in breadth-first order.
    pub fn reachable(&self) -> Vec<StateId> {
        let mut seen = BTreeSet::new();
        let mut order = Vec::new();
        let mut queue = alloc::collections::VecDeque::new();
        queue.push_back(self.root);
        seen.insert(self.root);
        while let Some(s) = queue.pop_front() {
            order.push(s);
            if let Node::PostCond {
                then, otherwise, ..
            } = &self.nodes[s]
            {
                for &next in [then, otherwise] {
                    if seen.insert(next) {
                        queue.push_back(next);
                    }
                }
            }
        }
        order
    }

    /// Foci of all reachable actions.
    pub fn foci(&self) -> BTreeSet<String> {
        self.reachable()
            .into_iter()
            .filter_map(|s| match &self.nodes[s] {
                Node::PostCond { action, .. } => Some(action.focus.clone()),
                _ => None,
            })
            .collect()
    }

    /// Drops unreachable states and renumbers the rest breadth-first from
    /// the root. Two threads with equal canonical forms are isomorphic.
    pub fn canonical(&self) -> Thread {
        let order = self.reachable();
        let index: BTreeMap<StateId, StateId> =
            order.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let nodes = order
            .iter()
            .map(|&old| match &self.nodes[old] {
                Node::PostCond {
                    action,
                    then,
                    otherwise,
                } => Node::PostCond {
                    action: action.clone(),
                    then: index[then],
                    otherwise: index[otherwise],
                },
                other => other.clone(),
            })
            .collect();
        Thread { nodes, root: 0 }
    }

    /// Equality of the behaviors denoted by two threads, independent of how
    /// their states are named or shared.
    pub fn same_behavior(&self, other: &Thread) -> bool {
        states_equivalent(self, self.root, other, other.root)
    }

    /// True when no reachable `PostCond` has branches with different
    /// behavior.
    pub fn is_trace(&self) -> bool {
        self.reachable().into_iter().all(|s| match &self.nodes[s] {
            Node::PostCond {
                then, otherwise, ..
            } => states_equivalent(self, *then, self, *otherwise),
            _ => true,
        })
    }
}

fn shift(node: Node, by: usize) -> Node {
    match node {
        Node::PostCond {
            action,
            then,
            otherwise,
        } => Node::PostCond {
            action,
            then: then + by,
            otherwise: otherwise + by,
        },
        other => other,
    }
}

fn states_equivalent(a: &Thread, sa: StateId, b: &Thread, sb: StateId) -> bool {
    let mut seen = BTreeSet::new();
    let mut stack = vec![(sa, sb)];
    while let Some((x, y)) = stack.pop() {
        if !seen.insert((x, y)) {
            continue;
        }
        match (&a.nodes[x], &b.nodes[y]) {
            (Node::Stop, Node::Stop) | (Node::Deadlock, Node::Deadlock) => {}
            (
                Node::PostCond {
                    action: ax,
                    then: tx,
                    otherwise: ox,
                },
                Node::PostCond {
                    action: ay,
                    then: ty,
                    otherwise: oy,
                },
            ) if ax == ay => {
                stack.push((*tx, *ty));
                stack.push((*ox, *oy));
            }
            _ => return false,
        }
    }
    true
}

/// Interns nodes while building a thread, sharing the two terminals.
struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    const STOP: StateId = 0;
    const DEADLOCK: StateId = 1;

    fn new() -> Self {
        Self {
            nodes: vec![Node::Stop, Node::Deadlock],
        }
    }

    fn push(&mut self, node: Node) -> StateId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn placeholder(&mut self) -> StateId {
        self.push(Node::Deadlock)
    }

    fn finish(self, root: StateId) -> Thread {
        Thread {
            nodes: self.nodes,
            root,
        }
        .canonical()
    }
}

/// The thread produced by running `iseq` from its first instruction.
///
/// Each instruction position becomes at most one state. `budget` caps the
/// number of states created.
pub fn extract_behavior(iseq: &InstructionSequence, budget: usize) -> Result<Thread, KernelError> {
    let program = iseq.instructions();
    let n = program.len();
    let mut builder = Builder::new();
    // state_at[i] is the state reached with control at position i; n means past the end.
    let mut state_at: Vec<StateId> = vec![Builder::DEADLOCK; n + 1];
    let mut created = 0usize;
    let at = |state_at: &[StateId], i: usize| if i >= n { Builder::DEADLOCK } else { state_at[i] };
    // Jumps only go forward, so filling positions back to front resolves
    // every successor before it is needed.
    for i in (0..n).rev() {
        let state = match &program[i] {
            Instruction::Halt => Builder::STOP,
            Instruction::Jump(0) => Builder::DEADLOCK,
            Instruction::Jump(k) => at(&state_at, i.saturating_add(*k)),
            Instruction::Basic(a) => {
                created += 1;
                let next = at(&state_at, i + 1);
                builder.push(Node::PostCond {
                    action: a.clone(),
                    then: next,
                    otherwise: next,
                })
            }
            Instruction::PositiveTest(a) => {
                created += 1;
                builder.push(Node::PostCond {
                    action: a.clone(),
                    then: at(&state_at, i + 1),
                    otherwise: at(&state_at, i + 2),
                })
            }
            Instruction::NegativeTest(a) => {
                created += 1;
                builder.push(Node::PostCond {
                    action: a.clone(),
                    then: at(&state_at, i + 2),
                    otherwise: at(&state_at, i + 1),
                })
            }
        };
        if created > budget {
            return Err(KernelError::BudgetExceeded(budget));
        }
        state_at[i] = state;
    }
    Ok(builder.finish(state_at[0]))
}

/// Attachment carried by a reply next to its boolean, for information
/// that does not steer control.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Attachment {
    pub kind: String,
    pub body: String,
}

impl Attachment {
    pub fn new(kind: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            body: body.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply<S> {
    pub value: bool,
    pub state: S,
    pub attachment: Option<Attachment>,
}

impl<S> Reply<S> {
    pub fn new(value: bool, state: S) -> Self {
        Self {
            value,
            state,
            attachment: None,
        }
    }

    pub fn with_attachment(mut self, attachment: Attachment) -> Self {
        self.attachment = Some(attachment);
        self
    }
}

/// A deterministic reactive component answering method calls at one focus.
pub trait Service {
    type State: Clone + Ord;

    fn focus(&self) -> &str;

    fn reply(&self, method: &str, state: &Self::State) -> Reply<Self::State>;
}

/// The result of a single call on a stateful service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub value: bool,
    pub attachment: Option<Attachment>,
}

/// A service together with its current state, usable as a trait object in
/// mixed environments.
pub trait Effector {
    fn focus(&self) -> &str;

    fn call(&mut self, method: &str) -> Response;
}

#[derive(Debug, Clone)]
pub struct Bound<S: Service> {
    pub service: S,
    pub state: S::State,
}

impl<S: Service> Bound<S> {
    pub fn new(service: S, state: S::State) -> Self {
        Self { service, state }
    }

    pub fn into_state(self) -> S::State {
        self.state
    }
}

impl<S: Service> Effector for Bound<S> {
    fn focus(&self) -> &str {
        self.service.focus()
    }

    fn call(&mut self, method: &str) -> Response {
        let reply = self.service.reply(method, &self.state);
        self.state = reply.state;
        Response {
            value: reply.value,
            attachment: reply.attachment,
        }
    }
}

/// The `use` operator: resolves every action at the service's focus,
/// threading its state, and keeps actions at other foci.
///
/// An infinite run of resolved actions yields `Deadlock`. `budget` bounds
/// the number of (state, service state) pairs and resolution steps.
pub fn use_service<S: Service>(
    thread: &Thread,
    service: &S,
    initial: &S::State,
    budget: usize,
) -> Result<Thread, KernelError> {
    let focus = service.focus();
    let mut builder = Builder::new();
    let mut ids: BTreeMap<(StateId, S::State), StateId> = BTreeMap::new();
    let mut pending: Vec<(StateId, StateId, S::State)> = Vec::new();
    let mut steps = 0usize;

    let intern = |builder: &mut Builder,
                      ids: &mut BTreeMap<(StateId, S::State), StateId>,
                      pending: &mut Vec<(StateId, StateId, S::State)>,
                      node: StateId,
                      st: S::State|
     -> Result<StateId, KernelError> {
        if let Some(&id) = ids.get(&(node, st.clone())) {
            return Ok(id);
        }
        if ids.len() >= budget {
            return Err(KernelError::BudgetExceeded(budget));
        }
        let id = builder.placeholder();
        ids.insert((node, st.clone()), id);
        pending.push((id, node, st));
        Ok(id)
    };

    let root = intern(
        &mut builder,
        &mut ids,
        &mut pending,
        thread.root,
        initial.clone(),
    )?;
    while let Some((id, start, start_state)) = pending.pop() {
        let mut node = start;
        let mut st = start_state;
        let mut chain = BTreeSet::new();
        let resolved = loop {
            match &thread.nodes[node] {
                Node::PostCond {
                    action,
                    then,
                    otherwise,
                } if action.focus == focus => {
                    if !chain.insert((node, st.clone())) {
                        break Node::Deadlock;
                    }
                    steps += 1;
                    if steps > budget {
                        return Err(KernelError::BudgetExceeded(budget));
                    }
                    let reply = service.reply(&action.method, &st);
                    node = if reply.value { *then } else { *otherwise };
                    st = reply.state;
                }
                Node::PostCond {
                    action,
                    then,
                    otherwise,
                } => {
                    let t = intern(&mut builder, &mut ids, &mut pending, *then, st.clone())?;
                    let o = intern(&mut builder, &mut ids, &mut pending, *otherwise, st.clone())?;
                    break Node::PostCond {
                        action: action.clone(),
                        then: t,
                        otherwise: o,
                    };
                }
                terminal => break terminal.clone(),
            }
        };
        builder.nodes[id] = resolved;
    }
    Ok(builder.finish(root))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Applied<S> {
    pub state: S,
    pub end: End,
}

/// The `apply` operator: runs the thread against the service and returns
/// the final service state, forgetting the thread.
pub fn apply_service<S: Service>(
    thread: &Thread,
    service: &S,
    initial: &S::State,
    budget: usize,
) -> Result<Applied<S::State>, KernelError> {
    let mut node = thread.root;
    let mut st = initial.clone();
    for _ in 0..=budget {
        match &thread.nodes[node] {
            Node::Stop => return Ok(Applied { state: st, end: End::Stop }),
            Node::Deadlock => {
                return Ok(Applied {
                    state: st,
                    end: End::Deadlock,
                })
            }
            Node::PostCond {
                action,
                then,
                otherwise,
            } => {
                if action.focus != service.focus() {
                    return Err(KernelError::UnservedFocus(action.focus.clone()));
                }
                let reply = service.reply(&action.method, &st);
                node = if reply.value { *then } else { *otherwise };
                st = reply.state;
            }
        }
    }
    Err(KernelError::BudgetExceeded(budget))
}

/// Cyclic strategic interleaving. The head thread performs one action and
/// moves to the back of the queue; finished threads leave the queue; a
/// deadlocked thread at its turn deadlocks the whole. An empty list is
/// already finished.
pub fn interleave(threads: &[Thread]) -> Thread {
    type Queue = Vec<(usize, StateId)>;

    let mut builder = Builder::new();
    let mut ids: BTreeMap<Queue, StateId> = BTreeMap::new();
    let mut pending: Vec<(StateId, Queue)> = Vec::new();

    fn intern(
        builder: &mut Builder,
        ids: &mut BTreeMap<Queue, StateId>,
        pending: &mut Vec<(StateId, Queue)>,
        queue: Queue,
    ) -> StateId {
        if let Some(&id) = ids.get(&queue) {
            return id;
        }
        let id = builder.placeholder();
        ids.insert(queue.clone(), id);
        pending.push((id, queue));
        id
    }

    let start: Queue = threads.iter().enumerate().map(|(i, t)| (i, t.root)).collect();
    let root = intern(&mut builder, &mut ids, &mut pending, start);
    while let Some((id, mut queue)) = pending.pop() {
        let resolved = loop {
            let Some(&(which, state)) = queue.first() else {
                break Node::Stop;
            };
            match &threads[which].nodes[state] {
                Node::Stop => {
                    queue.remove(0);
                }
                Node::Deadlock => break Node::Deadlock,
                Node::PostCond {
                    action,
                    then,
                    otherwise,
                } => {
                    let rest = &queue[1..];
                    let mut on_true = rest.to_vec();
                    on_true.push((which, *then));
                    let mut on_false = rest.to_vec();
                    on_false.push((which, *otherwise));
                    let (action, t, o) = (action.clone(), on_true, on_false);
                    let t = intern(&mut builder, &mut ids, &mut pending, t);
                    let o = intern(&mut builder, &mut ids, &mut pending, o);
                    break Node::PostCond {
                        action,
                        then: t,
                        otherwise: o,
                    };
                }
            }
        };
        builder.nodes[id] = resolved;
    }
    builder.finish(root)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub focus: String,
    pub method: String,
    pub reply: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attachment: Option<Attachment>,
}

/// A fully resolved behavior: the actions performed with their replies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub end: End,
}

impl Trace {
    /// The branch-free thread that performs exactly these events.
    pub fn to_thread(&self) -> Thread {
        Thread::action_prefix(
            self.events.iter().map(|e| Action::new(e.focus.clone(), e.method.clone())),
            self.end,
        )
    }
}

/// One event per line (`seq=<n> focus=<f> method=<m> reply=<bool>`), then
/// `end=<stop|deadlock>`.
impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.events.iter().enumerate() {
            writeln!(
                f,
                "seq={} focus={} method={} reply={}",
                i + 1,
                e.focus,
                e.method,
                e.reply
            )?;
        }
        writeln!(f, "end={}", self.end)
    }
}

/// Runs the thread against a set of stateful services until it stops or
/// deadlocks, recording every call.
pub fn run_to_trace(
    thread: &Thread,
    services: &mut [&mut dyn Effector],
    budget: usize,
) -> Result<Trace, KernelError> {
    let mut events = Vec::new();
    let mut node = thread.root;
    for _ in 0..=budget {
        match &thread.nodes[node] {
            Node::Stop => return Ok(Trace { events, end: End::Stop }),
            Node::Deadlock => {
                return Ok(Trace {
                    events,
                    end: End::Deadlock,
                })
            }
            Node::PostCond {
                action,
                then,
                otherwise,
            } => {
                let mut matching = services
                    .iter_mut()
                    .filter(|s| s.focus() == action.focus);
                let svc = matching
                    .next()
                    .ok_or_else(|| KernelError::UnservedFocus(action.focus.clone()))?;
                let response = svc.call(&action.method);
                if matching.next().is_some() {
                    return Err(KernelError::AmbiguousFocus(action.focus.clone()));
                }
                node = if response.value { *then } else { *otherwise };
                events.push(TraceEvent {
                    focus: action.focus.clone(),
                    method: action.method.clone(),
                    reply: response.value,
                    attachment: response.attachment,
                });
            }
        }
    }
    Err(KernelError::BudgetExceeded(budget))
}

/// Replies with a fixed value to every method; stateless.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstantService {
    pub focus: String,
    pub value: bool,
}

impl ConstantService {
    pub fn new(focus: impl Into<String>, value: bool) -> Self {
        Self {
            focus: focus.into(),
            value,
        }
    }
}

impl Service for ConstantService {
    type State = ();

    fn focus(&self) -> &str {
        &self.focus
    }

    fn reply(&self, _method: &str, _state: &()) -> Reply<()> {
        Reply::new(self.value, ())
    }
}

/// Counts `inc` calls; replies `true` to `inc` and to `is_zero` exactly when
/// the count is zero. Other methods reply `false`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterService {
    pub focus: String,
}

impl CounterService {
    pub fn new(focus: impl Into<String>) -> Self {
        Self {
            focus: focus.into(),
        }
    }
}

impl Service for CounterService {
    type State = u64;

    fn focus(&self) -> &str {
        &self.focus
    }

    fn reply(&self, method: &str, state: &u64) -> Reply<u64> {
        match method {
            "inc" => Reply::new(true, state + 1),
            "dec" => Reply::new(*state > 0, state.saturating_sub(1)),
            "is_zero" => Reply::new(*state == 0, *state),
            _ => Reply::new(false, *state),
        }
    }
}

/// Replies from a fixed script, one entry per call, then `false` forever.
/// The state is the number of calls served.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedService {
    pub focus: String,
    pub replies: Vec<bool>,
}

impl Service for ScriptedService {
    type State = usize;

    fn focus(&self) -> &str {
        &self.focus
    }

    fn reply(&self, _method: &str, state: &usize) -> Reply<usize> {
        Reply::new(self.replies.get(*state).copied().unwrap_or(false), state + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(f: &str, m: &str) -> Action {
        Action::new(f, m)
    }

    fn iseq(text: &str) -> InstructionSequence {
        InstructionSequence::parse(text).unwrap()
    }

    #[test]
    fn parses_single_halt() {
        assert_eq!(iseq("!").instructions(), &[Instruction::Halt]);
    }

    #[test]
    fn parses_direct_token_mapping() {
        assert_eq!(
            iseq("+owner.accept_bid; !; #0").instructions(),
            &[
                Instruction::PositiveTest(a("owner", "accept_bid")),
                Instruction::Halt,
                Instruction::Jump(0)
            ]
        );
    }

    #[test]
    fn jump_past_end_parses_and_deadlocks() {
        let p = iseq("mkt.list; #2");
        assert_eq!(
            p.instructions(),
            &[Instruction::Basic(a("mkt", "list")), Instruction::Jump(2)]
        );
        let t = extract_behavior(&p, 64).unwrap();
        let expected = Thread::action_prefix([a("mkt", "list")], End::Deadlock);
        assert!(t.same_behavior(&expected));
    }

    #[test]
    fn syntax_errors_report_position() {
        assert_eq!(
            InstructionSequence::parse("a.b; ?x; !"),
            Err(KernelError::Syntax {
                position: 2,
                token: "?x".into()
            })
        );
        assert!(matches!(
            InstructionSequence::parse("a.b; ; !"),
            Err(KernelError::Syntax { position: 2, .. })
        ));
        assert!(matches!(
            InstructionSequence::parse("#-1"),
            Err(KernelError::Syntax { position: 1, .. })
        ));
        assert!(matches!(
            InstructionSequence::parse("1a.b"),
            Err(KernelError::Syntax { position: 1, .. })
        ));
        assert_eq!(InstructionSequence::parse("  "), Err(KernelError::EmptyProgram));
    }

    #[test]
    fn display_round_trips() {
        let p = iseq("+owner.accept_bid;!;#0; -a.t; x.y");
        assert_eq!(p.to_string(), "+owner.accept_bid; !; #0; -a.t; x.y");
        assert_eq!(iseq(&p.to_string()), p);
    }

    #[test]
    fn extract_halt_is_stop() {
        assert_eq!(extract_behavior(&iseq("!"), 8).unwrap(), Thread::stop());
    }

    #[test]
    fn extract_basic_has_equal_branches() {
        let t = extract_behavior(&iseq("a.m; !"), 8).unwrap();
        let expected = Thread::post_cond(a("a", "m"), Thread::stop(), Thread::stop());
        assert!(t.same_behavior(&expected));
        assert!(t.is_trace());
    }

    #[test]
    fn extract_positive_test_branches() {
        let t = extract_behavior(&iseq("+a.t; !; #0"), 8).unwrap();
        let expected = Thread::post_cond(a("a", "t"), Thread::stop(), Thread::deadlock());
        assert!(t.same_behavior(&expected));
        assert!(!t.is_trace());
    }

    #[test]
    fn extract_negative_test_is_symmetric() {
        let t = extract_behavior(&iseq("-a.t; !; #0"), 8).unwrap();
        let expected = Thread::post_cond(a("a", "t"), Thread::deadlock(), Thread::stop());
        assert!(t.same_behavior(&expected));
    }

    #[test]
    fn jump_one_is_a_no_op() {
        let with = extract_behavior(&iseq("#1; a.m; !"), 8).unwrap();
        let without = extract_behavior(&iseq("a.m; !"), 8).unwrap();
        assert!(with.same_behavior(&without));
    }

    #[test]
    fn positions_are_shared() {
        // Both branches of the test join at `b.m`; one state per position.
        let t = extract_behavior(&iseq("+a.t; #1; b.m; !"), 8).unwrap();
        assert_eq!(t.nodes().len(), 3);
    }

    #[test]
    fn extraction_budget() {
        assert_eq!(
            extract_behavior(&iseq("a.m; a.m; a.m; !"), 2),
            Err(KernelError::BudgetExceeded(2))
        );
    }

    #[test]
    fn from_equations_checks_references() {
        assert_eq!(
            Thread::from_equations(vec![Node::Stop], 1),
            Err(KernelError::InvalidState(1))
        );
        let bad = Node::PostCond {
            action: a("a", "m"),
            then: 0,
            otherwise: 3,
        };
        assert_eq!(
            Thread::from_equations(vec![bad], 0),
            Err(KernelError::InvalidState(3))
        );
    }

    #[test]
    fn same_behavior_ignores_unfolding() {
        // x = a.m ∘ x, written with one and with two states.
        let one = Thread::from_equations(
            vec![Node::PostCond {
                action: a("a", "m"),
                then: 0,
                otherwise: 0,
            }],
            0,
        )
        .unwrap();
        let two = Thread::from_equations(
            vec![
                Node::PostCond {
                    action: a("a", "m"),
                    then: 1,
                    otherwise: 1,
                },
                Node::PostCond {
                    action: a("a", "m"),
                    then: 0,
                    otherwise: 0,
                },
            ],
            0,
        )
        .unwrap();
        assert!(one.same_behavior(&two));
        assert!(!one.same_behavior(&Thread::stop()));
    }

    #[test]
    fn use_on_terminals_is_identity() {
        let svc = ConstantService::new("owner", true);
        assert_eq!(use_service(&Thread::stop(), &svc, &(), 16).unwrap(), Thread::stop());
        assert_eq!(
            use_service(&Thread::deadlock(), &svc, &(), 16).unwrap(),
            Thread::deadlock()
        );
    }

    #[test]
    fn use_forces_branch() {
        let t = Thread::post_cond(a("owner", "accept"), Thread::stop(), Thread::deadlock());
        let svc = ConstantService::new("owner", true);
        assert_eq!(use_service(&t, &svc, &(), 16).unwrap(), Thread::stop());
        let svc = ConstantService::new("owner", false);
        assert_eq!(use_service(&t, &svc, &(), 16).unwrap(), Thread::deadlock());
    }

    #[test]
    fn use_preserves_other_foci() {
        let inner = Thread::post_cond(a("owner", "accept"), Thread::stop(), Thread::deadlock());
        let t = Thread::post_cond(a("mkt", "list"), inner.clone(), Thread::stop());
        let svc = ConstantService::new("owner", true);
        let got = use_service(&t, &svc, &(), 16).unwrap();
        let expected = Thread::post_cond(
            a("mkt", "list"),
            use_service(&inner, &svc, &(), 16).unwrap(),
            use_service(&Thread::stop(), &svc, &(), 16).unwrap(),
        );
        assert!(got.same_behavior(&expected));
    }

    #[test]
    fn use_threads_service_state() {
        // dec succeeds once from one, so the second dec takes the else branch.
        let t = extract_behavior(&iseq("c.inc; +c.dec; #1; +c.dec; !; #0"), 16).unwrap();
        let got = use_service(&t, &CounterService::new("c"), &0, 64).unwrap();
        assert_eq!(got, Thread::deadlock());
    }

    #[test]
    fn use_of_resolved_loop_is_deadlock() {
        let looping = Thread::from_equations(
            vec![Node::PostCond {
                action: a("s", "ping"),
                then: 0,
                otherwise: 0,
            }],
            0,
        )
        .unwrap();
        let svc = ConstantService::new("s", true);
        assert_eq!(use_service(&looping, &svc, &(), 16).unwrap(), Thread::deadlock());
        // Growing service state never repeats: the budget stops it.
        assert!(matches!(
            use_service(
                &Thread::from_equations(
                    vec![Node::PostCond {
                        action: a("c", "inc"),
                        then: 0,
                        otherwise: 0,
                    }],
                    0
                )
                .unwrap(),
                &CounterService::new("c"),
                &0,
                50
            ),
            Err(KernelError::BudgetExceeded(50))
        ));
    }

    #[test]
    fn apply_examples() {
        let counter = CounterService::new("ctr");
        assert_eq!(
            apply_service(&Thread::stop(), &counter, &0, 8).unwrap(),
            Applied { state: 0, end: End::Stop }
        );
        let once = Thread::post_cond(a("ctr", "inc"), Thread::stop(), Thread::stop());
        assert_eq!(
            apply_service(&once, &counter, &0, 8).unwrap(),
            Applied { state: 1, end: End::Stop }
        );
        let thrice = extract_behavior(&iseq("ctr.inc; ctr.inc; ctr.inc; !"), 8).unwrap();
        assert_eq!(
            apply_service(&thrice, &counter, &0, 8).unwrap(),
            Applied { state: 3, end: End::Stop }
        );
    }

    #[test]
    fn apply_errors() {
        let counter = CounterService::new("ctr");
        let other = Thread::post_cond(a("x", "inc"), Thread::stop(), Thread::stop());
        assert_eq!(
            apply_service(&other, &counter, &0, 8),
            Err(KernelError::UnservedFocus("x".into()))
        );
        let forever = Thread::from_equations(
            vec![Node::PostCond {
                action: a("ctr", "inc"),
                then: 0,
                otherwise: 0,
            }],
            0,
        )
        .unwrap();
        assert_eq!(
            apply_service(&forever, &counter, &0, 100),
            Err(KernelError::BudgetExceeded(100))
        );
    }

    #[test]
    fn interleave_examples() {
        let t = extract_behavior(&iseq("+a.t; b.m; !; #0"), 8).unwrap();
        assert!(interleave(core::slice::from_ref(&t)).same_behavior(&t));
        assert_eq!(interleave(&[Thread::stop(), Thread::stop()]), Thread::stop());
        assert_eq!(interleave(&[]), Thread::stop());

        let first = Thread::action_prefix([a("a", "m")], End::Stop);
        let second = Thread::action_prefix([a("b", "m")], End::Stop);
        let expected = Thread::action_prefix([a("a", "m"), a("b", "m")], End::Stop);
        assert!(interleave(&[first, second]).same_behavior(&expected));
    }

    #[test]
    fn interleave_rotates_and_drops_finished() {
        let x = Thread::action_prefix([a("x", "1"), a("x", "2"), a("x", "3")], End::Stop);
        let y = Thread::action_prefix([a("y", "1")], End::Stop);
        let expected = Thread::action_prefix(
            [a("x", "1"), a("y", "1"), a("x", "2"), a("x", "3")],
            End::Stop,
        );
        assert!(interleave(&[x, y]).same_behavior(&expected));
    }

    #[test]
    fn interleave_deadlock_at_turn() {
        let x = Thread::action_prefix([a("x", "1"), a("x", "2")], End::Stop);
        let d = Thread::deadlock();
        let expected = Thread::action_prefix([a("x", "1")], End::Deadlock);
        assert!(interleave(&[x, d]).same_behavior(&expected));
    }

    #[test]
    fn run_to_trace_examples() {
        let empty = run_to_trace(&Thread::stop(), &mut [], 8).unwrap();
        assert_eq!(
            empty,
            Trace {
                events: vec![],
                end: End::Stop
            }
        );
        assert_eq!(empty.to_string(), "end=stop\n");

        let t = Thread::post_cond(a("a", "m"), Thread::stop(), Thread::deadlock());
        let mut svc = Bound::new(ConstantService::new("a", true), ());
        let trace = run_to_trace(&t, &mut [&mut svc], 8).unwrap();
        assert_eq!(trace.to_string(), "seq=1 focus=a method=m reply=true\nend=stop\n");
    }

    #[test]
    fn run_to_trace_errors() {
        let t = Thread::post_cond(a("a", "m"), Thread::stop(), Thread::stop());
        assert_eq!(
            run_to_trace(&t, &mut [], 8),
            Err(KernelError::UnservedFocus("a".into()))
        );
        let mut s1 = Bound::new(ConstantService::new("a", true), ());
        let mut s2 = Bound::new(ConstantService::new("a", false), ());
        assert_eq!(
            run_to_trace(&t, &mut [&mut s1, &mut s2], 8),
            Err(KernelError::AmbiguousFocus("a".into()))
        );
        let forever = Thread::from_equations(
            vec![Node::PostCond {
                action: a("a", "m"),
                then: 0,
                otherwise: 0,
            }],
            0,
        )
        .unwrap();
        let mut s = Bound::new(ConstantService::new("a", true), ());
        assert_eq!(
            run_to_trace(&forever, &mut [&mut s], 10),
            Err(KernelError::BudgetExceeded(10))
        );
    }

    #[test]
    fn trace_matches_use_composition() {
        let t = extract_behavior(&iseq("+a.t; b.m; -b.m; #2; a.x; !"), 16).unwrap();
        let sa = ScriptedService {
            focus: "a".into(),
            replies: vec![true, false],
        };
        let sb = ConstantService::new("b", false);
        let composed = use_service(&use_service(&t, &sa, &0, 64).unwrap(), &sb, &(), 64).unwrap();
        assert!(composed.is_trace());
        let mut ba = Bound::new(sa, 0);
        let mut bb = Bound::new(sb, ());
        let trace = run_to_trace(&t, &mut [&mut ba, &mut bb], 64).unwrap();
        let expected_end = match composed.root_node() {
            Node::Stop => End::Stop,
            Node::Deadlock => End::Deadlock,
            Node::PostCond { .. } => unreachable!("all foci are served"),
        };
        assert_eq!(trace.end, expected_end);
        assert!(trace.to_thread().is_trace());
    }
}
