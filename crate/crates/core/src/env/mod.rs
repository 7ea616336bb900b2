//! The synthetic product-QA world the agent acts in.

mod search;
mod task;

use std::sync::Arc;

use thiserror::Error;

pub use search::{search, CompareOp, Condition, Predicate};
pub use task::{
    generate_task, Answer, FieldKind, FieldSpec, GroundTruth, LatentKnowledge, ProductTable,
    PublicQuestion, Question, QuestionKind, SyntheticTask, TaskFile, TaskParams, TokenLayout,
    TASK_FORMAT, TASK_VERSION,
};

use crate::ids::{ProductId, QuestionId};
use crate::memory::{KnowledgeEntry, QAPairEntry};
use crate::token::Token;

/// Rows appended to the context by one search call.
pub const SEARCH_LIMIT: usize = 3;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid task parameters: {0}")]
    InvalidParams(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("value `{value}` is not in the domain of `{field}`")]
    UnknownValue { field: String, value: String },
    #[error("query tokens do not form (column op value) triples")]
    MalformedQuery,
    #[error("no pending question")]
    NoPendingQuestion,
}

/// Expert that always answers with the ground truth, at a fixed cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertOracle {
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertAdvice {
    pub answer: Vec<Token>,
    /// Rendered knowledge behind the answer, or `[NO_INFO]`.
    pub knowledge_text: Vec<Token>,
}

impl ExpertOracle {
    pub fn consult(&self, task: &SyntheticTask, question: &Question) -> ExpertAdvice {
        let knowledge_text = question
            .knowledge_key
            .and_then(|k| task.knowledge(k))
            .map(LatentKnowledge::render)
            .unwrap_or_else(|| vec![Token::NO_INFO]);
        ExpertAdvice {
            answer: question.ground_truth.clone(),
            knowledge_text,
        }
    }
}

/// What the agent has in context when it predicts an answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct Evidence<'a> {
    pub qa: Option<&'a QAPairEntry>,
    pub knowledge: Option<&'a KnowledgeEntry>,
    pub search_results: Option<&'a [ProductId]>,
}

/// One trajectory's view of a task: the question cursor and advice cost.
/// The task itself is shared read-only.
#[derive(Debug, Clone)]
pub struct Environment {
    task: Arc<SyntheticTask>,
    cursor: usize,
    end: usize,
    expert: ExpertOracle,
}

impl Environment {
    pub fn new(task: Arc<SyntheticTask>, advice_cost: f64) -> Self {
        let end = task.questions.len();
        Self {
            task,
            cursor: 0,
            end,
            expert: ExpertOracle { cost: advice_cost },
        }
    }

    /// Serve at most `n` questions.
    pub fn with_limit(mut self, n: usize) -> Self {
        self.end = self.end.min(self.cursor + n);
        self
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn shared_task(&self) -> Arc<SyntheticTask> {
        Arc::clone(&self.task)
    }

    pub fn advice_cost(&self) -> f64 {
        self.expert.cost
    }

    pub fn remaining(&self) -> usize {
        self.end - self.cursor
    }

    pub fn served(&self) -> usize {
        self.cursor
    }

    pub fn next_question(&mut self) -> Option<QuestionId> {
        if self.cursor >= self.end {
            return None;
        }
        let id = self.task.questions[self.cursor].id;
        self.cursor += 1;
        Some(id)
    }

    pub fn question(&self, id: QuestionId) -> &Question {
        &self.task.questions[id.0 as usize]
    }

    fn pending(&self, pending: Option<QuestionId>) -> Result<&Question, EnvError> {
        pending
            .and_then(|id| self.task.question(id))
            .ok_or(EnvError::NoPendingQuestion)
    }

    /// 1 iff `answer` matches the ground truth token for token.
    pub fn grade(&self, pending: Option<QuestionId>, answer: &[Token]) -> Result<u8, EnvError> {
        let q = self.pending(pending)?;
        Ok(u8::from(q.ground_truth.as_slice() == answer))
    }

    pub fn consult_expert(&self, pending: Option<QuestionId>) -> Result<ExpertAdvice, EnvError> {
        let q = self.pending(pending)?;
        Ok(self.expert.consult(&self.task, q))
    }

    pub fn search(&self, predicate: &[Condition], limit: usize) -> Result<Vec<ProductId>, EnvError> {
        search(&self.task.table, predicate, limit)
    }

    /// Competence rule standing in for the language model: whether an
    /// answer predicted from `evidence` is correct.
    pub fn predict_succeeds(&self, question: &Question, evidence: &Evidence<'_>) -> bool {
        match question.kind {
            QuestionKind::Fact => {
                question.answerable_from_context
                    || evidence.qa.is_some_and(|qa| {
                        qa.product_id == question.product_id && qa.question_text == question.text
                    })
            }
            QuestionKind::Reasoning => evidence
                .knowledge
                .is_some_and(|k| k.topic_key.is_some() && k.topic_key == question.knowledge_key),
            QuestionKind::Search => evidence.search_results.is_some_and(|hits| {
                hits.first()
                    .is_some_and(|&p| vec![self.task.layout.product(p)] == question.ground_truth)
            }),
        }
    }

    /// Answer tokens the agent produces after `[PredictAnswer]`.
    pub fn predicted_answer(&self, question: &Question, evidence: &Evidence<'_>) -> Vec<Token> {
        if self.predict_succeeds(question, evidence) {
            question.ground_truth.clone()
        } else {
            vec![Token::NO_INFO]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(seed: u64) -> Environment {
        let t = generate_task(seed, &TaskParams::default()).unwrap();
        Environment::new(Arc::new(t), 0.3)
    }

    #[test]
    fn grading_is_exact_match() {
        let mut e = env(1);
        let id = e.next_question();
        let truth = e.question(id.unwrap()).ground_truth.clone();
        assert_eq!(e.grade(id, &truth).unwrap(), 1);
        let mut wrong = truth.clone();
        wrong[0] = Token(wrong[0].0 + 1);
        assert_eq!(e.grade(id, &wrong).unwrap(), 0);
        assert_eq!(e.grade(None, &truth), Err(EnvError::NoPendingQuestion));
    }

    #[test]
    fn expert_answers_always_grade_to_one() {
        let e = env(2);
        for q in &e.task().questions {
            let advice = e.consult_expert(Some(q.id)).unwrap();
            assert_eq!(e.grade(Some(q.id), &advice.answer).unwrap(), 1);
        }
    }

    #[test]
    fn expert_knowledge_text_follows_key() {
        let e = env(3);
        let task = e.task();
        let reasoning = task.questions.iter().find(|q| q.kind == QuestionKind::Reasoning).unwrap();
        let advice = e.consult_expert(Some(reasoning.id)).unwrap();
        let k = task.knowledge(reasoning.knowledge_key.unwrap()).unwrap();
        assert_eq!(advice.knowledge_text, k.render());
        let fact = task.questions.iter().find(|q| q.kind == QuestionKind::Fact).unwrap();
        assert_eq!(e.consult_expert(Some(fact.id)).unwrap().knowledge_text, vec![Token::NO_INFO]);
        assert_eq!(e.consult_expert(None), Err(EnvError::NoPendingQuestion));
    }

    #[test]
    fn cursor_respects_limit() {
        let mut e = env(4).with_limit(3);
        assert_eq!(e.remaining(), 3);
        let ids: Vec<_> = std::iter::from_fn(|| e.next_question()).collect();
        assert_eq!(ids, vec![QuestionId(0), QuestionId(1), QuestionId(2)]);
        assert_eq!(e.remaining(), 0);
    }

    #[test]
    fn competence_rule_by_kind() {
        let e = env(5);
        let task = e.task();
        let none = Evidence::default();
        for q in &task.questions {
            let ok = e.predict_succeeds(q, &none);
            assert_eq!(ok, q.kind == QuestionKind::Fact && q.answerable_from_context);
            let ans = e.predicted_answer(q, &none);
            assert_eq!(ans == q.ground_truth, ok);
        }
        let r = task.questions.iter().find(|q| q.kind == QuestionKind::Reasoning).unwrap();
        let good = KnowledgeEntry {
            text: task.knowledge(r.knowledge_key.unwrap()).unwrap().render(),
            topic_key: r.knowledge_key,
            session_written: 0,
        };
        assert!(e.predict_succeeds(r, &Evidence { knowledge: Some(&good), ..none }));
        let s = task.questions.iter().find(|q| q.kind == QuestionKind::Search).unwrap();
        let hits = e.search(s.predicate.as_ref().unwrap(), SEARCH_LIMIT).unwrap();
        assert!(e.predict_succeeds(s, &Evidence { search_results: Some(&hits), ..none }));
    }
}
