//! Task-decomposition DSL.
//!
//! A task is written one clause per line:
//!
//! ```text
//! # comments run to end of line
//! TASK pickplace
//! REACH puck
//! GRASP puck [NEAR(gripper,puck,0.03)]
//! MOVE_TO puck goal [GRASPED(puck)]
//! GOAL NEAR(puck,goal,0.02)
//! ```
//!
//! Motions are indexed from 1 in textual order. The goal counts as the final
//! stage, so a task with `k` motions has `k + 1` stages.

use std::fmt;

use thiserror::Error;

/// The seven abstract motion templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MotionKind {
    Reach,
    Grasp,
    MoveTo,
    Hook,
    PushTo,
    PullTo,
    SlideTo,
}

impl MotionKind {
    pub const ALL: [MotionKind; 7] = [
        MotionKind::Reach,
        MotionKind::Grasp,
        MotionKind::MoveTo,
        MotionKind::Hook,
        MotionKind::PushTo,
        MotionKind::PullTo,
        MotionKind::SlideTo,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            MotionKind::Reach => "REACH",
            MotionKind::Grasp => "GRASP",
            MotionKind::MoveTo => "MOVE_TO",
            MotionKind::Hook => "HOOK",
            MotionKind::PushTo => "PUSH_TO",
            MotionKind::PullTo => "PULL_TO",
            MotionKind::SlideTo => "SLIDE_TO",
        }
    }

    pub fn from_keyword(word: &str) -> Option<MotionKind> {
        MotionKind::ALL.into_iter().find(|k| k.keyword() == word)
    }

    /// Number of entity arguments the motion takes.
    pub fn arity(self) -> usize {
        match self {
            MotionKind::Reach | MotionKind::Grasp | MotionKind::Hook => 1,
            _ => 2,
        }
    }

    /// Motions whose kinematic test is "object moves toward target".
    pub fn is_transport(self) -> bool {
        self.arity() == 2
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Precondition {
    Near { a: String, b: String, threshold: f64 },
    Grasped(String),
    Hooked(String),
    ApertureBelow(f64),
}

impl Precondition {
    pub fn entities(&self) -> Vec<&str> {
        match self {
            Precondition::Near { a, b, .. } => vec![a, b],
            Precondition::Grasped(o) | Precondition::Hooked(o) => vec![o],
            Precondition::ApertureBelow(_) => vec![],
        }
    }
}

impl fmt::Display for Precondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precondition::Near { a, b, threshold } => write!(f, "NEAR({a},{b},{threshold})"),
            Precondition::Grasped(o) => write!(f, "GRASPED({o})"),
            Precondition::Hooked(o) => write!(f, "HOOKED({o})"),
            Precondition::ApertureBelow(x) => write!(f, "APERTURE_BELOW({x})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GoalPredicate {
    Near { a: String, b: String, threshold: f64 },
    Opened { entity: String, min_extension: f64 },
    Closed { entity: String, max_extension: f64 },
    Pressed { entity: String, min_depression: f64 },
}

impl GoalPredicate {
    pub fn entities(&self) -> Vec<&str> {
        match self {
            GoalPredicate::Near { a, b, .. } => vec![a, b],
            GoalPredicate::Opened { entity, .. }
            | GoalPredicate::Closed { entity, .. }
            | GoalPredicate::Pressed { entity, .. } => vec![entity],
        }
    }

    /// The articulated entity the predicate inspects, if any.
    pub fn articulated_entity(&self) -> Option<&str> {
        match self {
            GoalPredicate::Near { .. } => None,
            GoalPredicate::Opened { entity, .. }
            | GoalPredicate::Closed { entity, .. }
            | GoalPredicate::Pressed { entity, .. } => Some(entity),
        }
    }
}

impl fmt::Display for GoalPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GoalPredicate::Near { a, b, threshold } => write!(f, "NEAR({a},{b},{threshold})"),
            GoalPredicate::Opened { entity, min_extension } => {
                write!(f, "OPENED({entity},{min_extension})")
            }
            GoalPredicate::Closed { entity, max_extension } => {
                write!(f, "CLOSED({entity},{max_extension})")
            }
            GoalPredicate::Pressed { entity, min_depression } => {
                write!(f, "PRESSED({entity},{min_depression})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractMotion {
    pub kind: MotionKind,
    pub args: Vec<String>,
    pub preconditions: Vec<Precondition>,
    /// 1-based position in the task's motion sequence.
    pub index: usize,
}

impl AbstractMotion {
    /// The entity the motion acts on.
    pub fn subject(&self) -> &str {
        &self.args[0]
    }

    /// Destination entity for two-argument motions.
    pub fn target(&self) -> Option<&str> {
        self.args.get(1).map(String::as_str)
    }

    /// Canonical one-line description, e.g. `MOVE_TO puck goal`.
    pub fn description(&self) -> String {
        let mut s = self.kind.keyword().to_string();
        for a in &self.args {
            s.push(' ');
            s.push_str(a);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub motions: Vec<AbstractMotion>,
    pub goal: GoalPredicate,
}

impl TaskSpec {
    /// Total stage count: every motion plus the goal.
    pub fn stage_count(&self) -> usize {
        self.motions.len() + 1
    }

    /// Every entity mentioned anywhere in the spec, in first-mention order.
    pub fn referenced_entities(&self) -> Vec<&str> {
        let mentions = self
            .motions
            .iter()
            .flat_map(|m| {
                m.args
                    .iter()
                    .map(String::as_str)
                    .chain(m.preconditions.iter().flat_map(Precondition::entities))
            })
            .chain(self.goal.entities());
        let mut out: Vec<&str> = Vec::new();
        for e in mentions {
            if !out.contains(&e) {
                out.push(e);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("empty task specification")]
    EmptySpec,
    #[error("{line}:{column}: expected {expected}")]
    SyntaxError {
        line: usize,
        column: usize,
        expected: String,
    },
    #[error("{line}:{column}: wrong number of arguments for {kind} (expects {})", kind.arity())]
    ArityError {
        kind: MotionKind,
        line: usize,
        column: usize,
    },
    #[error("{line}:{column}: a task has exactly one GOAL")]
    DuplicateGoal { line: usize, column: usize },
}

impl ParseError {
    /// 1-based (line, column) of the error.
    pub fn position(&self) -> (usize, usize) {
        match self {
            ParseError::EmptySpec => (1, 1),
            ParseError::SyntaxError { line, column, .. }
            | ParseError::ArityError { line, column, .. }
            | ParseError::DuplicateGoal { line, column } => (*line, *column),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Number(f64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("'{w}'"),
            Tok::Number(x) => format!("number {x}"),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::LBracket => "'['".into(),
            Tok::RBracket => "']'".into(),
            Tok::Comma => "','".into(),
        }
    }
}

/// Tokens of one source line, each with its 1-based column.
struct Line {
    number: usize,
    toks: Vec<(Tok, usize)>,
    end_column: usize,
}

fn is_word_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn syntax(line: usize, column: usize, expected: impl Into<String>) -> ParseError {
    ParseError::SyntaxError {
        line,
        column,
        expected: expected.into(),
    }
}

fn lex_line(number: usize, text: &str) -> Result<Line, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        match c {
            '#' => break,
            ' ' | '\t' | '\r' => i += 1,
            '(' => {
                toks.push((Tok::LParen, col));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, col));
                i += 1;
            }
            '[' => {
                toks.push((Tok::LBracket, col));
                i += 1;
            }
            ']' => {
                toks.push((Tok::RBracket, col));
                i += 1;
            }
            ',' => {
                toks.push((Tok::Comma, col));
                i += 1;
            }
            c if is_word_start(c) => {
                let start = i;
                while i < chars.len() && is_word_char(chars[i]) {
                    i += 1;
                }
                toks.push((Tok::Word(chars[start..i].iter().collect()), col));
            }
            c if c.is_ascii_digit() || c == '.' || c == '-' || c == '+' => {
                let start = i;
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    let prev = chars[i - 1];
                    let exp_sign = (d == '-' || d == '+') && (prev == 'e' || prev == 'E');
                    if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                let lexeme: String = chars[start..i].iter().collect();
                match lexeme.parse::<f64>() {
                    Ok(x) if x.is_finite() => toks.push((Tok::Number(x), col)),
                    _ => return Err(syntax(number, col, "a number")),
                }
            }
            _ => return Err(syntax(number, col, "identifier, number, or punctuation")),
        }
    }
    Ok(Line {
        number,
        toks,
        end_column: chars.len() + 1,
    })
}

struct Cursor<'a> {
    line: &'a Line,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(line: &'a Line) -> Self {
        Cursor { line, pos: 0 }
    }

    fn peek(&self) -> Option<&'a Tok> {
        self.line.toks.get(self.pos).map(|(t, _)| t)
    }

    fn column(&self) -> usize {
        self.line
            .toks
            .get(self.pos)
            .map(|(_, c)| *c)
            .unwrap_or(self.line.end_column)
    }

    fn err(&self, expected: &str) -> ParseError {
        let found = match self.peek() {
            Some(t) => t.describe(),
            None => "end of line".into(),
        };
        syntax(self.line.number, self.column(), format!("{expected}, found {found}"))
    }

    fn word(&mut self, expected: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Word(w)) => {
                self.pos += 1;
                Ok(w.clone())
            }
            _ => Err(self.err(expected)),
        }
    }

    fn positive(&mut self) -> Result<f64, ParseError> {
        match self.peek() {
            Some(Tok::Number(x)) if *x > 0.0 => {
                self.pos += 1;
                Ok(*x)
            }
            _ => Err(self.err("a positive number")),
        }
    }

    fn expect(&mut self, tok: Tok) -> Result<(), ParseError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&tok.describe()))
        }
    }

    fn end(&self) -> Result<(), ParseError> {
        if self.peek().is_none() {
            Ok(())
        } else {
            Err(self.err("end of line"))
        }
    }
}

/// A predicate call `NAME(arg, ...)` whose arguments have not been typed yet.
struct Call {
    name: String,
    column: usize,
}

fn call_head(c: &mut Cursor<'_>, expected: &str) -> Result<Call, ParseError> {
    let column = c.column();
    let name = c.word(expected)?;
    c.expect(Tok::LParen)?;
    Ok(Call { name, column })
}

fn near_args(c: &mut Cursor<'_>) -> Result<(String, String, f64), ParseError> {
    let a = c.word("an entity identifier")?;
    c.expect(Tok::Comma)?;
    let b = c.word("an entity identifier")?;
    c.expect(Tok::Comma)?;
    let t = c.positive()?;
    c.expect(Tok::RParen)?;
    Ok((a, b, t))
}

fn entity_threshold_args(c: &mut Cursor<'_>) -> Result<(String, f64), ParseError> {
    let e = c.word("an entity identifier")?;
    c.expect(Tok::Comma)?;
    let t = c.positive()?;
    c.expect(Tok::RParen)?;
    Ok((e, t))
}

fn parse_precondition(c: &mut Cursor<'_>) -> Result<Precondition, ParseError> {
    const EXPECTED: &str = "a precondition (NEAR, GRASPED, HOOKED, APERTURE_BELOW)";
    let head = call_head(c, EXPECTED)?;
    match head.name.as_str() {
        "NEAR" => {
            let (a, b, threshold) = near_args(c)?;
            Ok(Precondition::Near { a, b, threshold })
        }
        "GRASPED" | "HOOKED" => {
            let o = c.word("an entity identifier")?;
            c.expect(Tok::RParen)?;
            Ok(if head.name == "GRASPED" {
                Precondition::Grasped(o)
            } else {
                Precondition::Hooked(o)
            })
        }
        "APERTURE_BELOW" => {
            let f = c.positive()?;
            c.expect(Tok::RParen)?;
            Ok(Precondition::ApertureBelow(f))
        }
        _ => Err(syntax(c.line.number, head.column, EXPECTED)),
    }
}

fn parse_goal(c: &mut Cursor<'_>) -> Result<GoalPredicate, ParseError> {
    const EXPECTED: &str = "a goal predicate (NEAR, OPENED, CLOSED, PRESSED)";
    let head = call_head(c, EXPECTED)?;
    match head.name.as_str() {
        "NEAR" => {
            let (a, b, threshold) = near_args(c)?;
            Ok(GoalPredicate::Near { a, b, threshold })
        }
        "OPENED" => {
            let (entity, min_extension) = entity_threshold_args(c)?;
            Ok(GoalPredicate::Opened { entity, min_extension })
        }
        "CLOSED" => {
            let (entity, max_extension) = entity_threshold_args(c)?;
            Ok(GoalPredicate::Closed { entity, max_extension })
        }
        "PRESSED" => {
            let (entity, min_depression) = entity_threshold_args(c)?;
            Ok(GoalPredicate::Pressed { entity, min_depression })
        }
        _ => Err(syntax(c.line.number, head.column, EXPECTED)),
    }
}

fn parse_motion(
    c: &mut Cursor<'_>,
    kind: MotionKind,
    index: usize,
) -> Result<AbstractMotion, ParseError> {
    let kind_column = c.line.toks[0].1;
    let mut args = Vec::new();
    while let Some(Tok::Word(w)) = c.peek() {
        args.push(w.clone());
        c.pos += 1;
    }
    if args.len() != kind.arity() {
        return Err(ParseError::ArityError {
            kind,
            line: c.line.number,
            column: kind_column,
        });
    }
    let mut preconditions = Vec::new();
    if c.peek() == Some(&Tok::LBracket) {
        c.pos += 1;
        loop {
            preconditions.push(parse_precondition(c)?);
            match c.peek() {
                Some(Tok::Comma) => c.pos += 1,
                Some(Tok::RBracket) => {
                    c.pos += 1;
                    break;
                }
                _ => return Err(c.err("',' or ']'")),
            }
        }
    }
    c.end()?;
    Ok(AbstractMotion {
        kind,
        args,
        preconditions,
        index,
    })
}

/// Parses DSL source into a [`TaskSpec`].
pub fn parse_task_spec(text: &str) -> Result<TaskSpec, ParseError> {
    let mut lines = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = lex_line(i + 1, raw)?;
        if !line.toks.is_empty() {
            lines.push(line);
        }
    }
    let Some(first) = lines.first() else {
        return Err(ParseError::EmptySpec);
    };

    let mut c = Cursor::new(first);
    match c.peek() {
        Some(Tok::Word(w)) if w == "TASK" => c.pos += 1,
        _ => return Err(c.err("'TASK'")),
    }
    let name = c.word("a task name")?;
    c.end()?;

    let mut motions = Vec::new();
    let mut goal: Option<GoalPredicate> = None;
    for line in &lines[1..] {
        let mut c = Cursor::new(line);
        let column = c.column();
        let keyword = c.word("a motion keyword or 'GOAL'")?;
        if keyword == "GOAL" {
            if goal.is_some() {
                return Err(ParseError::DuplicateGoal {
                    line: line.number,
                    column,
                });
            }
            if motions.is_empty() {
                return Err(syntax(line.number, column, "at least one motion before GOAL"));
            }
            let g = parse_goal(&mut c)?;
            c.end()?;
            goal = Some(g);
            continue;
        }
        if goal.is_some() {
            return Err(syntax(line.number, column, "end of input after GOAL"));
        }
        let kind = MotionKind::from_keyword(&keyword).ok_or_else(|| {
            syntax(line.number, column, "a motion keyword or 'GOAL'")
        })?;
        motions.push(parse_motion(&mut c, kind, motions.len() + 1)?);
    }

    let goal = match goal {
        Some(g) => g,
        None => {
            let last = lines.last().expect("non-empty");
            let expected = if motions.is_empty() {
                "a motion line"
            } else {
                "a GOAL line"
            };
            return Err(syntax(last.number + 1, 1, expected));
        }
    };
    Ok(TaskSpec {
        name,
        motions,
        goal,
    })
}

/// Canonical text form: one clause per line, LF endings, no comments.
pub fn serialize_task_spec(spec: &TaskSpec) -> String {
    let mut out = format!("TASK {}\n", spec.name);
    for m in &spec.motions {
        out.push_str(&m.description());
        if !m.preconditions.is_empty() {
            let preds: Vec<String> = m.preconditions.iter().map(ToString::to_string).collect();
            out.push_str(" [");
            out.push_str(&preds.join(","));
            out.push(']');
        }
        out.push('\n');
    }
    out.push_str(&format!("GOAL {}\n", spec.goal));
    out
}

/// What role an entity plays in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityRole {
    Gripper,
    /// Free rigid object (puck).
    Rigid,
    /// Static target marker.
    Target,
    /// Handle rigidly attached to an articulation.
    Handle,
    /// Body constrained to a one-dimensional joint.
    Articulated,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneSchema {
    pub entities: Vec<(String, EntityRole)>,
}

impl SceneSchema {
    pub fn new<S: Into<String>>(entities: impl IntoIterator<Item = (S, EntityRole)>) -> Self {
        SceneSchema {
            entities: entities.into_iter().map(|(n, r)| (n.into(), r)).collect(),
        }
    }

    pub fn role(&self, name: &str) -> Option<EntityRole> {
        self.entities
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| *r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationIssue {
    UnknownEntity(String),
    NotArticulated(String),
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::UnknownEntity(e) => write!(f, "unknown entity '{e}'"),
            ValidationIssue::NotArticulated(e) => {
                write!(f, "goal references '{e}', which is not articulated")
            }
        }
    }
}

/// Checks entity references against a scene schema. Issues are reported once
/// per entity in first-mention order.
pub fn validate_task_spec(spec: &TaskSpec, schema: &SceneSchema) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    for e in spec.referenced_entities() {
        if schema.role(e).is_none() {
            issues.push(ValidationIssue::UnknownEntity(e.to_string()));
        }
    }
    if let Some(e) = spec.goal.articulated_entity() {
        if let Some(role) = schema.role(e) {
            if role != EntityRole::Articulated {
                issues.push(ValidationIssue::NotArticulated(e.to_string()));
            }
        }
    }
    issues
}
