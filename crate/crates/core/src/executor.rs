//! The agent executor: applies action tokens to the (context, memory)
//! state, dispatching function-name tokens to registered handlers.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Environment, Evidence, ExpertAdvice, QuestionKind, SEARCH_LIMIT};
use crate::ids::{ProductId, QuestionId};
use crate::memory::{KnowledgeEntry, MemoryStore, QAPairEntry, RetrievalConfig};
use crate::policy::{
    argmax_index, sample_index, DecisionKind, DecisionPoint, FeatureVector, Observation,
    PolicyError, PolicyModel, SelectionMode,
};
use crate::token::{FunctionName, Token, TokenKind, Vocabulary};
use crate::trajectory::{DecisionRecord, SessionTrajectory, StateDigest, StepRecord, Trajectory};

pub const DEFAULT_MAX_LEN: usize = 4096;
pub const DEFAULT_DECISION_BUDGET: usize = 16;
/// Similarity at which two questions count as "similar enough".
pub const DEFAULT_SIMILAR_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("token id {0} is not in the vocabulary")]
    UnknownToken(u32),
    #[error("BOS cannot be used as an action")]
    BosAction,
    #[error("context would grow to {needed} tokens, limit is {max_len}")]
    ContextOverflow { needed: usize, max_len: usize },
    #[error("handler for {function} failed: {reason}")]
    HandlerFailure { function: FunctionName, reason: String },
    #[error("the environment has no questions left")]
    EnvironmentExhausted,
    #[error("session exceeded the budget of {0} actions")]
    PolicyDiverged(usize),
    #[error("no handler registered for {0}")]
    MissingHandler(FunctionName),
    #[error("a handler for {0} is already registered")]
    DuplicateHandler(FunctionName),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

fn failure(function: FunctionName, reason: impl Into<String>) -> ExecError {
    ExecError::HandlerFailure {
        function,
        reason: reason.into(),
    }
}

/// Agent capabilities; switching one off is an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub memory: bool,
    pub reflection: bool,
    pub advice: bool,
    pub tool: bool,
}

impl Default for Capabilities {
    fn default() -> Self {
        Self {
            memory: true,
            reflection: true,
            advice: true,
            tool: true,
        }
    }
}

impl Capabilities {
    pub fn enables(&self, f: FunctionName) -> bool {
        match f {
            FunctionName::SeekAdvice => self.advice,
            FunctionName::Reflection => self.reflection,
            FunctionName::SearchProduct => self.tool,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecutorConfig {
    pub max_len: usize,
    pub decision_budget: usize,
    pub retrieval: RetrievalConfig,
    pub similar_threshold: f64,
    pub capabilities: Capabilities,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            max_len: DEFAULT_MAX_LEN,
            decision_budget: DEFAULT_DECISION_BUDGET,
            retrieval: RetrievalConfig::default(),
            similar_threshold: DEFAULT_SIMILAR_THRESHOLD,
            capabilities: Capabilities::default(),
        }
    }
}

/// Token sequence the policy conditions on, with each token's position in
/// the cumulative emitted stream. The first token is always BOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    tokens: Vec<Token>,
    positions: Vec<usize>,
    max_len: usize,
}

impl Context {
    pub fn new(max_len: usize) -> Self {
        Self {
            tokens: vec![Token::BOS],
            positions: vec![0],
            max_len: max_len.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    fn reset(&mut self) {
        self.tokens.truncate(1);
        self.positions.truncate(1);
    }

    fn push(&mut self, token: Token, position: usize) {
        self.tokens.push(token);
        self.positions.push(position);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum ContentSink {
    #[default]
    None,
    Answer,
    Reflection,
}

/// Per-session working memory of the executor, cleared by `[ClearContext]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionScratch {
    pub retrieved_qa: Option<(QAPairEntry, f64)>,
    pub retrieved_knowledge: Option<(KnowledgeEntry, f64)>,
    pub search_results: Option<Vec<ProductId>>,
    pub advice: Option<ExpertAdvice>,
    pub answer: Vec<Token>,
    pub reflection: Vec<Token>,
    pub submitted: bool,
    sink: ContentSink,
}

/// MDP state: the context plus long-term memory.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub context: Context,
    pub memory: MemoryStore,
    pub session_index: u64,
    pub pending_question: Option<QuestionId>,
    pub scratch: SessionScratch,
    stream_len: usize,
}

impl AgentState {
    pub fn new(max_len: usize) -> Self {
        Self::with_memory(max_len, MemoryStore::new())
    }

    pub fn with_memory(max_len: usize, memory: MemoryStore) -> Self {
        Self {
            context: Context::new(max_len),
            memory,
            session_index: 0,
            pending_question: None,
            scratch: SessionScratch::default(),
            stream_len: 1,
        }
    }

    /// Length of the emitted stream so far, counting the root BOS.
    pub fn stream_len(&self) -> usize {
        self.stream_len
    }

    pub fn digest(&self) -> StateDigest {
        StateDigest {
            context: self.context.positions().to_vec(),
            memory_size: self.memory.len(),
            session_index: self.session_index,
        }
    }

    pub fn evidence(&self) -> Evidence<'_> {
        Evidence {
            qa: self.scratch.retrieved_qa.as_ref().map(|(e, _)| e),
            knowledge: self.scratch.retrieved_knowledge.as_ref().map(|(e, _)| e),
            search_results: self.scratch.search_results.as_deref(),
        }
    }
}

/// Tokens a handler appends after the function name, and the step reward.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HandlerOutput {
    pub emitted: Vec<Token>,
    pub reward: f64,
}

pub trait FunctionHandler: Send + Sync {
    fn call(
        &self,
        state: &mut AgentState,
        env: &mut Environment,
        config: &ExecutorConfig,
    ) -> Result<HandlerOutput, ExecError>;
}

impl<F> FunctionHandler for F
where
    F: Fn(&mut AgentState, &mut Environment, &ExecutorConfig) -> Result<HandlerOutput, ExecError>
        + Send
        + Sync,
{
    fn call(
        &self,
        state: &mut AgentState,
        env: &mut Environment,
        config: &ExecutorConfig,
    ) -> Result<HandlerOutput, ExecError> {
        self(state, env, config)
    }
}

#[derive(Default)]
pub struct FunctionRegistry {
    handlers: BTreeMap<FunctionName, Box<dyn FunctionHandler>>,
}

impl std::fmt::Debug for FunctionRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.handlers.keys()).finish()
    }
}

impl FunctionRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: FunctionName,
        handler: impl FunctionHandler + 'static,
    ) -> Result<(), ExecError> {
        if self.handlers.contains_key(&name) {
            return Err(ExecError::DuplicateHandler(name));
        }
        self.handlers.insert(name, Box::new(handler));
        Ok(())
    }

    pub fn get(&self, name: FunctionName) -> Option<&dyn FunctionHandler> {
        self.handlers.get(&name).map(|b| b.as_ref())
    }

    /// Every function name has a handler.
    pub fn validate(&self) -> Result<(), ExecError> {
        match FunctionName::ALL.into_iter().find(|f| !self.handlers.contains_key(f)) {
            Some(f) => Err(ExecError::MissingHandler(f)),
            None => Ok(()),
        }
    }

    /// Handlers for the product-QA agent.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        let entries: [(FunctionName, fn(&mut AgentState, &mut Environment, &ExecutorConfig) -> Result<HandlerOutput, ExecError>); 9] = [
            (FunctionName::GetQuestion, get_question),
            (FunctionName::RetrieveMemory, retrieve_memory),
            (FunctionName::SeekAdvice, seek_advice),
            (FunctionName::Reflection, reflection),
            (FunctionName::UpdateMemory, update_memory),
            (FunctionName::SearchProduct, search_product),
            (FunctionName::PredictAnswer, predict_answer),
            (FunctionName::SubmitAnswer, submit_answer),
            (FunctionName::ClearContext, clear_context),
        ];
        for (name, handler) in entries {
            r.register(name, handler).expect("standard handlers are distinct");
        }
        r
    }
}

fn pending(state: &AgentState, f: FunctionName) -> Result<QuestionId, ExecError> {
    state
        .pending_question
        .ok_or_else(|| failure(f, "no pending question"))
}

fn get_question(
    state: &mut AgentState,
    env: &mut Environment,
    _: &ExecutorConfig,
) -> Result<HandlerOutput, ExecError> {
    let f = FunctionName::GetQuestion;
    if state.pending_question.is_some() {
        return Err(failure(f, "a question is already pending"));
    }
    let id = env.next_question().ok_or(ExecError::EnvironmentExhausted)?;
    let q = env.question(id);
    let mut emitted = q.text.clone();
    emitted.push(Token::SEP);
    emitted.extend(env.task().product_metadata(q.product_id));
    state.pending_question = Some(id);
    state.scratch = SessionScratch::default();
    Ok(HandlerOutput {
        emitted,
        reward: 0.0,
    })
}

fn retrieve_memory(
    state: &mut AgentState,
    env: &mut Environment,
    config: &ExecutorConfig,
) -> Result<HandlerOutput, ExecError> {
    let f = FunctionName::RetrieveMemory;
    let q = env.question(pending(state, f)?);
    let (qa, kn) = if config.capabilities.memory {
        let (qa, kn) = state
            .memory
            .retrieve_top_k(&q.text, q.product_id, config.retrieval)
            .map_err(|e| failure(f, e.to_string()))?;
        (
            qa.first().map(|s| (s.entry.clone(), s.similarity)),
            kn.first().map(|s| (s.entry.clone(), s.similarity)),
        )
    } else {
        (None, None)
    };
    let mut emitted = Vec::new();
    match &qa {
        Some((e, _)) => {
            emitted.extend(&e.question_text);
            emitted.extend(&e.short_answer);
        }
        None => emitted.push(Token::NO_INFO),
    }
    emitted.push(Token::SEP);
    match &kn {
        Some((e, _)) => emitted.extend(&e.text),
        None => emitted.push(Token::NO_INFO),
    }
    state.scratch.retrieved_qa = qa;
    state.scratch.retrieved_knowledge = kn;
    Ok(HandlerOutput {
        emitted,
        reward: 0.0,
    })
}

fn seek_advice(
    state: &mut AgentState,
    env: &mut Environment,
    config: &ExecutorConfig,
) -> Result<HandlerOutput, ExecError> {
    let f = FunctionName::SeekAdvice;
    if !config.capabilities.advice {
        return Err(failure(f, "advice is disabled"));
    }
    let advice = env
        .consult_expert(Some(pending(state, f)?))
        .map_err(|e| failure(f, e.to_string()))?;
    let mut emitted = advice.answer.clone();
    emitted.push(Token::SEP);
    emitted.extend(&advice.knowledge_text);
    state.scratch.answer = advice.answer.clone();
    state.scratch.sink = ContentSink::None;
    state.scratch.advice = Some(advice);
    Ok(HandlerOutput {
        emitted,
        reward: -env.advice_cost(),
    })
}

fn reflection(
    state: &mut AgentState,
    _: &mut Environment,
    config: &ExecutorConfig,
) -> Result<HandlerOutput, ExecError> {
    let f = FunctionName::Reflection;
    if !config.capabilities.reflection {
        return Err(failure(f, "reflection is disabled"));
    }
    if state.scratch.advice.is_none() {
        return Err(failure(f, "nothing to reflect on"));
    }
    state.scratch.reflection.clear();
    state.scratch.sink = ContentSink::Reflection;
    Ok(HandlerOutput::default())
}

fn update_memory(
    state: &mut AgentState,
    env: &mut Environment,
    _: &ExecutorConfig,
) -> Result<HandlerOutput, ExecError> {
    let f = FunctionName::UpdateMemory;
    let q = env.question(pending(state, f)?);
    let advice = state
        .scratch
        .advice
        .as_ref()
        .ok_or_else(|| failure(f, "no advice in context to write"))?;
    if q.product_id.0 as usize >= env.task().table.num_products() {
        return Err(failure(f, "unknown product"));
    }
    let mut long_answer = advice.answer.clone();
    long_answer.extend(&advice.knowledge_text);
    let session = state.session_index;
    let qa = QAPairEntry {
        product_id: q.product_id,
        question_text: q.text.clone(),
        short_answer: advice.answer.clone(),
        long_answer,
        session_written: session,
    };
    let knowledge = (!state.scratch.reflection.is_empty()).then(|| KnowledgeEntry {
        text: state.scratch.reflection.clone(),
        topic_key: q.knowledge_key,
        session_written: session,
    });
    state
        .memory
        .insert_qa(qa)
        .map_err(|e| failure(f, e.to_string()))?;
    if let Some(k) = knowledge {
        state
            .memory
            .insert_knowledge(k)
            .map_err(|e| failure(f, e.to_string()))?;
    }
    state.scratch.sink = ContentSink::None;
    Ok(HandlerOutput::default())
}

fn search_product(
    state: &mut AgentState,
    env: &mut Environment,
    config: &ExecutorConfig,
) -> Result<HandlerOutput, ExecError> {
    let f = FunctionName::SearchProduct;
    if !config.capabilities.tool {
        return Err(failure(f, "search tool is disabled"));
    }
    let q = env.question(pending(state, f)?);
    let query: Vec<Token> = match q.text.split_first() {
        Some((&Token::SEARCH, rest)) => rest.to_vec(),
        _ => Vec::new(),
    };
    let mut emitted = query.clone();
    let results = env
        .task()
        .parse_query(&query)
        .and_then(|pred| env.search(&pred, SEARCH_LIMIT));
    match results {
        Ok(ids) => {
            emitted.push(Token::SEP);
            emitted.extend(ids.iter().map(|&p| env.task().layout.product(p)));
            state.scratch.search_results = Some(ids);
        }
        Err(_) => {
            emitted.push(Token::SEARCH_ERROR);
            state.scratch.search_results = Some(Vec::new());
        }
    }
    Ok(HandlerOutput {
        emitted,
        reward: 0.0,
    })
}

fn predict_answer(
    state: &mut AgentState,
    _: &mut Environment,
    _: &ExecutorConfig,
) -> Result<HandlerOutput, ExecError> {
    pending(state, FunctionName::PredictAnswer)?;
    state.scratch.answer.clear();
    state.scratch.sink = ContentSink::Answer;
    Ok(HandlerOutput::default())
}

fn submit_answer(
    state: &mut AgentState,
    env: &mut Environment,
    _: &ExecutorConfig,
) -> Result<HandlerOutput, ExecError> {
    let f = FunctionName::SubmitAnswer;
    let id = pending(state, f)?;
    if state.scratch.submitted {
        return Err(failure(f, "answer already submitted"));
    }
    if state.scratch.answer.is_empty() {
        return Err(failure(f, "no answer in context"));
    }
    let grade = env
        .grade(Some(id), &state.scratch.answer)
        .map_err(|e| failure(f, e.to_string()))?;
    state.scratch.submitted = true;
    state.scratch.sink = ContentSink::None;
    Ok(HandlerOutput {
        emitted: Vec::new(),
        reward: f64::from(grade),
    })
}

fn clear_context(
    state: &mut AgentState,
    _: &mut Environment,
    _: &ExecutorConfig,
) -> Result<HandlerOutput, ExecError> {
    if state.pending_question.take().is_some() {
        state.session_index += 1;
    }
    state.scratch = SessionScratch::default();
    Ok(HandlerOutput::default())
}

/// Applies actions to agent states.
#[derive(Debug)]
pub struct Executor {
    vocab: Vocabulary,
    registry: FunctionRegistry,
    config: ExecutorConfig,
}

impl Executor {
    pub fn new(vocab: Vocabulary, config: ExecutorConfig) -> Self {
        Self::with_registry(vocab, config, FunctionRegistry::standard())
            .expect("standard registry is complete")
    }

    pub fn with_registry(
        vocab: Vocabulary,
        config: ExecutorConfig,
        registry: FunctionRegistry,
    ) -> Result<Self, ExecError> {
        registry.validate()?;
        Ok(Self {
            vocab,
            registry,
            config,
        })
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn new_state(&self) -> AgentState {
        AgentState::new(self.config.max_len)
    }

    /// One MDP transition. The action token is appended first; a function
    /// name then runs its handler, whose tokens follow it. `[ClearContext]`
    /// instead leaves only BOS.
    pub fn step(
        &self,
        state: &mut AgentState,
        action: Token,
        env: &mut Environment,
    ) -> Result<StepRecord, ExecError> {
        if !self.vocab.contains(action) {
            return Err(ExecError::UnknownToken(action.0));
        }
        let max_len = state.context.max_len();
        if state.context.len() >= max_len {
            return Err(ExecError::ContextOverflow {
                needed: state.context.len() + 1,
                max_len,
            });
        }
        let snapshot = state.context.positions().to_vec();
        let (output, function) = match action.kind() {
            TokenKind::Bos => return Err(ExecError::BosAction),
            TokenKind::Function(f) => {
                let handler = self.registry.get(f).ok_or(ExecError::MissingHandler(f))?;
                (handler.call(state, env, &self.config)?, Some(f))
            }
            TokenKind::Content => {
                match state.scratch.sink {
                    ContentSink::Answer => state.scratch.answer.push(action),
                    ContentSink::Reflection => state.scratch.reflection.push(action),
                    ContentSink::None => {}
                }
                (HandlerOutput::default(), None)
            }
        };
        if let Some(t) = output.emitted.iter().find(|t| !self.vocab.contains(**t)) {
            return Err(ExecError::UnknownToken(t.0));
        }
        let mut emitted = Vec::with_capacity(1 + output.emitted.len());
        emitted.push(action);
        emitted.extend(output.emitted);
        let start = state.stream_len;
        if function == Some(FunctionName::ClearContext) {
            state.context.reset();
        } else {
            let needed = state.context.len() + emitted.len();
            if needed > max_len {
                return Err(ExecError::ContextOverflow { needed, max_len });
            }
            for (i, &t) in emitted.iter().enumerate() {
                state.context.push(t, start + i);
            }
        }
        state.stream_len += emitted.len();
        Ok(StepRecord {
            action,
            emitted,
            context: snapshot,
            reward: output.reward,
        })
    }
}

/// Privileged information for demonstrators; learned policies ignore it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleHint {
    pub kind: QuestionKind,
    pub predict_succeeds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: FunctionName,
    pub logprob: f64,
}

/// Chooses the action at each decision point of a session.
pub trait Decider {
    fn decide(
        &mut self,
        point: &DecisionPoint,
        hint: &OracleHint,
        rng: &mut dyn RngCore,
    ) -> Result<Decision, ExecError>;

    /// Tag for rollouts produced by this decider.
    fn checkpoint(&self) -> Option<String> {
        None
    }
}

/// Drives decisions from a [`PolicyModel`].
#[derive(Debug)]
pub struct PolicyDecider<'a, P: PolicyModel + ?Sized> {
    pub policy: &'a P,
    pub mode: SelectionMode,
}

impl<'a, P: PolicyModel + ?Sized> PolicyDecider<'a, P> {
    pub fn new(policy: &'a P, mode: SelectionMode) -> Self {
        Self { policy, mode }
    }
}

impl<P: PolicyModel + ?Sized> Decider for PolicyDecider<'_, P> {
    fn decide(
        &mut self,
        point: &DecisionPoint,
        _: &OracleHint,
        rng: &mut dyn RngCore,
    ) -> Result<Decision, ExecError> {
        let probs = self.policy.action_distribution(point)?;
        let i = match self.mode {
            SelectionMode::Sample => sample_index(&probs, rng),
            SelectionMode::Greedy => argmax_index(&probs),
        };
        Ok(Decision {
            action: point.allowed[i],
            logprob: probs[i].ln(),
        })
    }

    fn checkpoint(&self) -> Option<String> {
        Some(self.policy.checkpoint())
    }
}

/// Demonstrator following the training-data template: search for search
/// questions, predict when the competence rule says the answer is known,
/// otherwise seek advice and reflect on it.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpertDemonstrator;

impl Decider for ExpertDemonstrator {
    fn decide(
        &mut self,
        point: &DecisionPoint,
        hint: &OracleHint,
        _: &mut dyn RngCore,
    ) -> Result<Decision, ExecError> {
        let allows = |a| point.allowed.contains(&a);
        let action = match point.kind {
            DecisionKind::AfterRetrieve => {
                if hint.kind == QuestionKind::Search && allows(FunctionName::SearchProduct) {
                    FunctionName::SearchProduct
                } else if hint.predict_succeeds || !allows(FunctionName::SeekAdvice) {
                    FunctionName::PredictAnswer
                } else {
                    FunctionName::SeekAdvice
                }
            }
            DecisionKind::AfterAdvice => {
                if allows(FunctionName::Reflection) {
                    FunctionName::Reflection
                } else {
                    FunctionName::UpdateMemory
                }
            }
        };
        Ok(Decision {
            action,
            logprob: 0.0,
        })
    }
}

impl Executor {
    fn observe(&self, state: &AgentState, env: &Environment) -> Result<FeatureVector, ExecError> {
        let id = state.pending_question.ok_or(ExecError::EnvironmentExhausted)?;
        let q = env.question(id);
        let s = &state.scratch;
        let similar = if self.config.capabilities.memory {
            state
                .memory
                .count_similar_questions(&q.text, self.config.similar_threshold)
        } else {
            0
        };
        Ok(FeatureVector::from(&Observation {
            qa_similarity: s.retrieved_qa.as_ref().map_or(0.0, |(_, v)| *v),
            knowledge_similarity: s.retrieved_knowledge.as_ref().map_or(0.0, |(_, v)| *v),
            qa_hit: s.retrieved_qa.is_some(),
            knowledge_hit: s.retrieved_knowledge.is_some(),
            kind: q.kind,
            difficulty: q.difficulty,
            advice_cost: env.advice_cost(),
            similar_in_memory: similar,
        }))
    }

    /// Runs one session:
    /// GetQuestion → RetrieveMemory → [SearchProduct] →
    /// (PredictAnswer answer | SeekAdvice [Reflection text] UpdateMemory) →
    /// SubmitAnswer → ClearContext.
    pub fn run_session(
        &self,
        decider: &mut dyn Decider,
        env: &mut Environment,
        state: &mut AgentState,
        rng: &mut dyn RngCore,
    ) -> Result<SessionTrajectory, ExecError> {
        if env.remaining() == 0 {
            return Err(ExecError::EnvironmentExhausted);
        }
        let caps = self.config.capabilities;
        let initial_state = state.digest();
        let stream_offset = state.stream_len;
        let mut steps: Vec<StepRecord> = Vec::new();
        let mut decisions: Vec<DecisionRecord> = Vec::new();
        let budget = self.config.decision_budget;

        let act = |state: &mut AgentState, env: &mut Environment, t: Token, steps: &mut Vec<StepRecord>| {
            if steps.len() >= budget {
                return Err(ExecError::PolicyDiverged(budget));
            }
            let rec = self.step(state, t, env)?;
            steps.push(rec);
            Ok::<(), ExecError>(())
        };

        act(state, env, FunctionName::GetQuestion.token(), &mut steps)?;
        let question = state.pending_question;
        act(state, env, FunctionName::RetrieveMemory.token(), &mut steps)?;

        let decide = |kind: DecisionKind,
                          state: &AgentState,
                          env: &Environment,
                          steps: &[StepRecord],
                          decider: &mut dyn Decider,
                          decisions: &mut Vec<DecisionRecord>,
                          rng: &mut dyn RngCore|
         -> Result<FunctionName, ExecError> {
            let searched = state.scratch.search_results.is_some();
            let point = DecisionPoint::new(kind, self.observe(state, env)?, |a| {
                caps.enables(a) && !(a == FunctionName::SearchProduct && searched)
            })?;
            let q = env.question(state.pending_question.expect("session is open"));
            let hint = OracleHint {
                kind: q.kind,
                predict_succeeds: env.predict_succeeds(q, &state.evidence()),
            };
            let d = decider.decide(&point, &hint, rng)?;
            point.position(d.action)?;
            if point.allowed.len() > 1 {
                decisions.push(DecisionRecord {
                    step: steps.len(),
                    point,
                    action: d.action,
                    logprob: d.logprob,
                });
            }
            Ok(d.action)
        };

        loop {
            let choice = decide(
                DecisionKind::AfterRetrieve,
                state,
                env,
                &steps,
                decider,
                &mut decisions,
                rng,
            )?;
            act(state, env, choice.token(), &mut steps)?;
            match choice {
                FunctionName::SearchProduct => continue,
                FunctionName::PredictAnswer => {
                    let q = env.question(state.pending_question.expect("session is open"));
                    let answer = env.predicted_answer(q, &state.evidence());
                    for t in answer {
                        act(state, env, t, &mut steps)?;
                    }
                    break;
                }
                FunctionName::SeekAdvice => {
                    let after = decide(
                        DecisionKind::AfterAdvice,
                        state,
                        env,
                        &steps,
                        decider,
                        &mut decisions,
                        rng,
                    )?;
                    if after == FunctionName::Reflection {
                        act(state, env, FunctionName::Reflection.token(), &mut steps)?;
                        let text = state
                            .scratch
                            .advice
                            .as_ref()
                            .map(|a| a.knowledge_text.clone())
                            .unwrap_or_default();
                        for t in text {
                            act(state, env, t, &mut steps)?;
                        }
                    }
                    act(state, env, FunctionName::UpdateMemory.token(), &mut steps)?;
                    break;
                }
                other => unreachable!("{other} is not an AfterRetrieve action"),
            }
        }
        act(state, env, FunctionName::SubmitAnswer.token(), &mut steps)?;
        act(state, env, FunctionName::ClearContext.token(), &mut steps)?;

        Ok(SessionTrajectory {
            total_reward: steps.iter().map(|s| s.reward).sum(),
            steps,
            decisions,
            initial_state,
            stream_offset,
            question,
            checkpoint: decider.checkpoint(),
        })
    }

    /// Runs sessions until the environment is exhausted (or `max_sessions`).
    pub fn run_trajectory(
        &self,
        decider: &mut dyn Decider,
        env: &mut Environment,
        state: &mut AgentState,
        rng: &mut dyn RngCore,
        max_sessions: Option<usize>,
    ) -> Result<(Trajectory, Vec<SessionTrajectory>), ExecError> {
        let mut traj = Trajectory {
            initial_memory_size: state.memory.len(),
            initial_session_index: state.session_index,
            checkpoint: decider.checkpoint(),
            ..Trajectory::default()
        };
        let mut sessions = Vec::new();
        while env.remaining() > 0 && max_sessions.is_none_or(|m| sessions.len() < m) {
            let s = self.run_session(decider, env, state, rng)?;
            let base = traj.steps.len();
            traj.steps.extend(s.steps.iter().cloned());
            traj.decisions.extend(s.decisions.iter().map(|d| DecisionRecord {
                step: base + d.step,
                ..d.clone()
            }));
            sessions.push(s);
        }
        Ok((traj, sessions))
    }
}
