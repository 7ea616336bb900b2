//! Procedural product-group tasks: feature table, latent knowledge, and a
//! question stream with ground truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::search::{search, CompareOp, Condition};
use super::EnvError;
use crate::ids::{KnowledgeKey, ProductId, QuestionId};
use crate::token::{Token, Vocabulary, CONTENT_BASE};

pub const TASK_FORMAT: &str = "agile-task";
pub const TASK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    /// Value domain; numeric domains are listed in ascending order.
    pub values: Vec<String>,
}

impl FieldSpec {
    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

fn default_schema() -> Vec<FieldSpec> {
    let cat = |name: &str, values: &[&str]| FieldSpec {
        name: name.into(),
        kind: FieldKind::Categorical,
        values: values.iter().map(|s| s.to_string()).collect(),
    };
    let num = |name: &str, values: &[&str]| FieldSpec {
        name: name.into(),
        kind: FieldKind::Numeric,
        values: values.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        cat("brand", &["acme", "globex", "initech", "umbrella", "hooli"]),
        cat("form_factor", &["atx", "micro_atx", "mini_itx", "e_atx"]),
        cat("color", &["black", "white", "silver", "red"]),
        num("memory_support", &["8", "16", "32", "64", "128"]),
        num("price_tier", &["1", "2", "3", "4", "5"]),
        num("rating", &["1", "2", "3", "4", "5"]),
        cat("chipset", &["z790", "b760", "x670", "b650"]),
        cat("wifi", &["yes", "no"]),
        cat("audio", &["realtek", "creative", "none"]),
        num("storage_slots", &["2", "4", "6", "8"]),
        num("usb_ports", &["4", "6", "8", "10"]),
        num("warranty_years", &["1", "2", "3", "5"]),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductTable {
    pub group_name: String,
    pub schema: Vec<FieldSpec>,
    /// `rows[p][f]` is the domain index of field `f` for product `p`.
    pub rows: Vec<Vec<usize>>,
}

impl ProductTable {
    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|f| f.name == name)
    }

    pub fn num_products(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        for (p, row) in self.rows.iter().enumerate() {
            if row.len() != self.schema.len() {
                return Err(EnvError::InvalidTask(format!("row {p} has wrong arity")));
            }
            for (f, &v) in row.iter().enumerate() {
                if v >= self.schema[f].values.len() {
                    return Err(EnvError::InvalidTask(format!(
                        "row {p} field {} out of domain",
                        self.schema[f].name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentKnowledge {
    pub key: KnowledgeKey,
    /// (field index, value index) that triggers the implication.
    pub premise: (usize, usize),
    pub implication: Token,
    pub topic: Token,
}

impl LatentKnowledge {
    /// Token rendering handed out by the expert.
    pub fn render(&self) -> Vec<Token> {
        vec![self.topic, self.implication]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Fact,
    Search,
    Reasoning,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 3] = [QuestionKind::Fact, QuestionKind::Search, QuestionKind::Reasoning];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: QuestionId,
    pub product_id: ProductId,
    pub kind: QuestionKind,
    pub text: Vec<Token>,
    pub ground_truth: Vec<Token>,
    pub knowledge_key: Option<KnowledgeKey>,
    pub answerable_from_context: bool,
    /// Policy-observable difficulty in `[0, 1]`; for fact questions the
    /// chance of being answerable from context falls as it rises.
    pub difficulty: f64,
    /// Structured form of a search question's query.
    pub predicate: Option<Vec<Condition>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskParams {
    pub num_products: usize,
    pub num_questions: usize,
    /// Proportions of (fact, search, reasoning) questions.
    pub kind_mix: [f64; 3],
    pub knowledge_count: usize,
    /// Base rate of fact questions answerable from context alone.
    pub answerable_rate: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            num_products: 18,
            num_questions: 1000,
            kind_mix: [0.5, 0.25, 0.25],
            knowledge_count: 80,
            answerable_rate: 0.5,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidParams(m.into()));
        if !(17..=20).contains(&self.num_products) {
            return bad("num_products must be within 17..=20");
        }
        if self.num_questions == 0 {
            return bad("num_questions must be positive");
        }
        if self.knowledge_count == 0 {
            return bad("knowledge_count must be positive");
        }
        if self.kind_mix.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || (self.kind_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("kind_mix must be non-negative and sum to 1");
        }
        if !(self.answerable_rate > 0.0 && self.answerable_rate < 1.0) {
            return bad("answerable_rate must be within (0, 1)");
        }
        Ok(())
    }
}

/// Content-token id assignment for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    num_products: u32,
    field_offsets: Vec<u32>,
    num_fields: u32,
    num_values: u32,
    knowledge_count: u32,
}

impl TokenLayout {
    pub fn new(num_products: usize, schema: &[FieldSpec], knowledge_count: usize) -> Self {
        let mut field_offsets = Vec::with_capacity(schema.len());
        let mut acc = 0u32;
        for f in schema {
            field_offsets.push(acc);
            acc += f.values.len() as u32;
        }
        Self {
            num_products: num_products as u32,
            field_offsets,
            num_fields: schema.len() as u32,
            num_values: acc,
            knowledge_count: knowledge_count as u32,
        }
    }

    fn product_base(&self) -> u32 {
        CONTENT_BASE
    }
    fn field_base(&self) -> u32 {
        self.product_base() + self.num_products
    }
    fn column_base(&self) -> u32 {
        self.field_base() + self.num_fields
    }
    fn value_base(&self) -> u32 {
        self.column_base() + self.num_fields
    }
    fn topic_base(&self) -> u32 {
        self.value_base() + self.num_values
    }
    fn implication_base(&self) -> u32 {
        self.topic_base() + self.knowledge_count
    }
    pub fn end(&self) -> u32 {
        self.implication_base() + self.knowledge_count
    }

    pub fn product(&self, p: ProductId) -> Token {
        Token(self.product_base() + p.0)
    }
    pub fn product_of(&self, t: Token) -> Option<ProductId> {
        (self.product_base()..self.field_base())
            .contains(&t.0)
            .then(|| ProductId(t.0 - self.product_base()))
    }
    /// Natural-language field token (used in fact questions).
    pub fn field(&self, f: usize) -> Token {
        Token(self.field_base() + f as u32)
    }
    /// Query-language column token (used in search predicates).
    pub fn column(&self, f: usize) -> Token {
        Token(self.column_base() + f as u32)
    }
    pub fn column_of(&self, t: Token) -> Option<usize> {
        (self.column_base()..self.value_base())
            .contains(&t.0)
            .then(|| (t.0 - self.column_base()) as usize)
    }
    pub fn value(&self, f: usize, v: usize) -> Token {
        Token(self.value_base() + self.field_offsets[f] + v as u32)
    }
    /// (field, value index) for a value token.
    pub fn value_of(&self, t: Token) -> Option<(usize, usize)> {
        if !(self.value_base()..self.topic_base()).contains(&t.0) {
            return None;
        }
        let off = t.0 - self.value_base();
        let f = self.field_offsets.iter().rposition(|&o| o <= off)?;
        Some((f, (off - self.field_offsets[f]) as usize))
    }
    pub fn topic(&self, k: KnowledgeKey) -> Token {
        Token(self.topic_base() + k.0)
    }
    pub fn implication(&self, k: KnowledgeKey) -> Token {
        Token(self.implication_base() + k.0)
    }

    pub fn vocabulary(&self, schema: &[FieldSpec]) -> Vocabulary {
        let mut names = Vec::with_capacity((self.end() - CONTENT_BASE) as usize);
        names.extend((0..self.num_products).map(|p| format!("product:{p}")));
        names.extend(schema.iter().map(|f| f.name.clone()));
        names.extend(schema.iter().map(|f| format!("col:{}", f.name)));
        for f in schema {
            names.extend(f.values.iter().map(|v| format!("{}={}", f.name, v)));
        }
        names.extend((0..self.knowledge_count).map(|k| format!("topic:{k}")));
        names.extend((0..self.knowledge_count).map(|k| format!("implies:{k}")));
        Vocabulary::new(names)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub seed: u64,
    pub params: TaskParams,
    pub table: ProductTable,
    pub knowledge: Vec<LatentKnowledge>,
    pub questions: Vec<Question>,
    pub layout: TokenLayout,
}

impl SyntheticTask {
    pub fn vocabulary(&self) -> Vocabulary {
        self.layout.vocabulary(&self.table.schema)
    }

    pub fn knowledge(&self, key: KnowledgeKey) -> Option<&LatentKnowledge> {
        self.knowledge.get(key.0 as usize)
    }

    pub fn question(&self, id: QuestionId) -> Option<&Question> {
        self.questions.get(id.0 as usize)
    }

    /// Tokens describing one product row: `[product, v_1, .., v_F]`.
    pub fn product_metadata(&self, p: ProductId) -> Vec<Token> {
        let mut out = vec![self.layout.product(p)];
        if let Some(row) = self.table.rows.get(p.0 as usize) {
            out.extend(row.iter().enumerate().map(|(f, &v)| self.layout.value(f, v)));
        }
        out
    }

    /// Decodes query tokens `(col op value)*` into a predicate.
    pub fn parse_query(&self, tokens: &[Token]) -> Result<Vec<Condition>, EnvError> {
        if !tokens.len().is_multiple_of(3) {
            return Err(EnvError::MalformedQuery);
        }
        tokens
            .chunks(3)
            .map(|c| {
                let field = self.layout.column_of(c[0]).ok_or(EnvError::MalformedQuery)?;
                let op = match c[1] {
                    Token::OP_EQ => CompareOp::Eq,
                    Token::OP_GE => CompareOp::Ge,
                    Token::OP_LE => CompareOp::Le,
                    _ => return Err(EnvError::MalformedQuery),
                };
                let (vf, v) = self.layout.value_of(c[2]).ok_or(EnvError::MalformedQuery)?;
                let spec = self.table.schema.get(field).ok_or(EnvError::MalformedQuery)?;
                let vspec = &self.table.schema[vf];
                if vf != field {
                    return Err(EnvError::UnknownValue {
                        field: spec.name.clone(),
                        value: vspec.values[v].clone(),
                    });
                }
                Ok(Condition::new(spec.name.clone(), op, vspec.values[v].clone()))
            })
            .collect()
    }

    pub fn encode_query(&self, predicate: &[Condition]) -> Result<Vec<Token>, EnvError> {
        let mut out = Vec::with_capacity(predicate.len() * 3);
        for c in predicate {
            let f = self
                .table
                .field_index(&c.field)
                .ok_or_else(|| EnvError::UnknownField(c.field.clone()))?;
            let v = self.table.schema[f].value_index(&c.value).ok_or_else(|| {
                EnvError::UnknownValue {
                    field: c.field.clone(),
                    value: c.value.clone(),
                }
            })?;
            out.push(self.layout.column(f));
            out.push(match c.op {
                CompareOp::Eq => Token::OP_EQ,
                CompareOp::Ge => Token::OP_GE,
                CompareOp::Le => Token::OP_LE,
            });
            out.push(self.layout.value(f, v));
        }
        Ok(out)
    }

    pub fn to_file(&self) -> TaskFile {
        TaskFile {
            format: TASK_FORMAT.into(),
            version: TASK_VERSION,
            seed: self.seed,
            params: self.params.clone(),
            group_name: self.table.group_name.clone(),
            schema: self.table.schema.clone(),
            rows: self.table.rows.clone(),
            questions: self
                .questions
                .iter()
                .map(|q| PublicQuestion {
                    id: q.id,
                    product_id: q.product_id,
                    kind: q.kind,
                    text: q.text.clone(),
                    difficulty: q.difficulty,
                })
                .collect(),
            ground_truth: GroundTruth {
                knowledge: self.knowledge.clone(),
                answers: self
                    .questions
                    .iter()
                    .map(|q| Answer {
                        id: q.id,
                        answer: q.ground_truth.clone(),
                        knowledge_key: q.knowledge_key,
                        answerable_from_context: q.answerable_from_context,
                        predicate: q.predicate.clone(),
                    })
                    .collect(),
            },
        }
    }

    pub fn from_file(file: TaskFile) -> Result<Self, EnvError> {
        if file.format != TASK_FORMAT || file.version != TASK_VERSION {
            return Err(EnvError::InvalidTask(format!(
                "unsupported task format {} v{}",
                file.format, file.version
            )));
        }
        if file.questions.len() != file.ground_truth.answers.len() {
            return Err(EnvError::InvalidTask("ground truth does not cover every question".into()));
        }
        let table = ProductTable {
            group_name: file.group_name,
            schema: file.schema,
            rows: file.rows,
        };
        table.validate()?;
        let layout = TokenLayout::new(table.rows.len(), &table.schema, file.ground_truth.knowledge.len());
        let questions = file
            .questions
            .into_iter()
            .zip(file.ground_truth.answers)
            .map(|(q, a)| {
                if q.id != a.id {
                    return Err(EnvError::InvalidTask(format!("ground truth id mismatch at {}", q.id)));
                }
                Ok(Question {
                    id: q.id,
                    product_id: q.product_id,
                    kind: q.kind,
                    text: q.text,
                    ground_truth: a.answer,
                    knowledge_key: a.knowledge_key,
                    answerable_from_context: a.answerable_from_context,
                    difficulty: q.difficulty,
                    predicate: a.predicate,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            seed: file.seed,
            params: file.params,
            table,
            knowledge: file.ground_truth.knowledge,
            questions,
            layout,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("task serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let file: TaskFile =
            serde_json::from_str(text).map_err(|e| EnvError::InvalidTask(e.to_string()))?;
        Self::from_file(file)
    }
}

/// Policy-visible part of a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicQuestion {
    pub id: QuestionId,
    pub product_id: ProductId,
    pub kind: QuestionKind,
    pub text: Vec<Token>,
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub id: QuestionId,
    pub answer: Vec<Token>,
    pub knowledge_key: Option<KnowledgeKey>,
    pub answerable_from_context: bool,
    pub predicate: Option<Vec<Condition>>,
}

/// Evaluation-only section of a task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub knowledge: Vec<LatentKnowledge>,
    pub answers: Vec<Answer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub params: TaskParams,
    pub group_name: String,
    pub schema: Vec<FieldSpec>,
    pub rows: Vec<Vec<usize>>,
    pub questions: Vec<PublicQuestion>,
    pub ground_truth: GroundTruth,
}

fn pick_kind(rng: &mut ChaCha8Rng, mix: &[f64; 3]) -> QuestionKind {
    let u: f64 = rng.gen();
    if u < mix[0] {
        QuestionKind::Fact
    } else if u < mix[0] + mix[1] {
        QuestionKind::Search
    } else {
        QuestionKind::Reasoning
    }
}

/// Builds a task as a pure function of `(seed, params)`.
pub fn generate_task(seed: u64, params: &TaskParams) -> Result<SyntheticTask, EnvError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = default_schema();
    let rows: Vec<Vec<usize>> = (0..params.num_products)
        .map(|_| schema.iter().map(|f| rng.gen_range(0..f.values.len())).collect())
        .collect();
    let table = ProductTable {
        group_name: format!("group-{seed}"),
        schema,
        rows,
    };
    let layout = TokenLayout::new(params.num_products, &table.schema, params.knowledge_count);
    let knowledge: Vec<LatentKnowledge> = (0..params.knowledge_count)
        .map(|k| {
            let key = KnowledgeKey(k as u32);
            let f = rng.gen_range(0..table.schema.len());
            let v = rng.gen_range(0..table.schema[f].values.len());
            LatentKnowledge {
                key,
                premise: (f, v),
                implication: layout.implication(key),
                topic: layout.topic(key),
            }
        })
        .collect();

    // P(answerable | d) = (1 - d)^e has mean answerable_rate for d ~ U(0, 1).
    let exponent = (1.0 - params.answerable_rate) / params.answerable_rate;
    let mut questions = Vec::with_capacity(params.num_questions);
    for i in 0..params.num_questions {
        let id = QuestionId(i as u32);
        let kind = pick_kind(&mut rng, &params.kind_mix);
        let product = ProductId(rng.gen_range(0..params.num_products) as u32);
        let difficulty: f64 = rng.gen();
        let answer_draw: f64 = rng.gen();
        let q = match kind {
            QuestionKind::Fact => {
                let f = rng.gen_range(0..table.schema.len());
                let v = table.rows[product.0 as usize][f];
                Question {
                    id,
                    product_id: product,
                    kind,
                    text: vec![layout.field(f)],
                    ground_truth: vec![layout.value(f, v)],
                    knowledge_key: None,
                    answerable_from_context: answer_draw < (1.0 - difficulty).powf(exponent),
                    difficulty,
                    predicate: None,
                }
            }
            QuestionKind::Search => {
                let target = rng.gen_range(0..params.num_products);
                let mut fields: Vec<usize> = (0..table.schema.len()).collect();
                fields.shuffle(&mut rng);
                fields.truncate(rng.gen_range(1..=2));
                fields.sort_unstable();
                let predicate: Vec<Condition> = fields
                    .iter()
                    .map(|&f| {
                        let spec = &table.schema[f];
                        let op = match spec.kind {
                            FieldKind::Categorical => CompareOp::Eq,
                            FieldKind::Numeric => {
                                [CompareOp::Eq, CompareOp::Ge, CompareOp::Le][rng.gen_range(0..3)]
                            }
                        };
                        Condition::new(
                            spec.name.clone(),
                            op,
                            spec.values[table.rows[target][f]].clone(),
                        )
                    })
                    .collect();
                let hits = search(&table, &predicate, 1)?;
                let first = *hits.first().expect("target row satisfies its own predicate");
                let mut text = vec![Token::SEARCH];
                for c in &predicate {
                    let f = table.field_index(&c.field).expect("generated field");
                    let v = table.schema[f].value_index(&c.value).expect("generated value");
                    text.push(layout.column(f));
                    text.push(match c.op {
                        CompareOp::Eq => Token::OP_EQ,
                        CompareOp::Ge => Token::OP_GE,
                        CompareOp::Le => Token::OP_LE,
                    });
                    text.push(layout.value(f, v));
                }
                Question {
                    id,
                    product_id: product,
                    kind,
                    text,
                    ground_truth: vec![layout.product(first)],
                    knowledge_key: None,
                    answerable_from_context: false,
                    difficulty,
                    predicate: Some(predicate),
                }
            }
            QuestionKind::Reasoning => {
                let k = &knowledge[rng.gen_range(0..knowledge.len())];
                let (f, v) = k.premise;
                let holds = table.rows[product.0 as usize][f] == v;
                Question {
                    id,
                    product_id: product,
                    kind,
                    text: vec![k.topic],
                    ground_truth: vec![if holds { k.implication } else { Token::NO }],
                    knowledge_key: Some(k.key),
                    answerable_from_context: false,
                    difficulty,
                    predicate: None,
                }
            }
        };
        questions.push(q);
    }

    Ok(SyntheticTask {
        seed,
        params: params.clone(),
        table,
        knowledge,
        questions,
        layout,
    })
}
