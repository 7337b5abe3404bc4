//! Fixed referring-expression grammar:
//!
//! ```text
//! attribute  := "the" COLOR KIND
//! relational := "the" COLOR KIND RELATION "the" COLOR KIND
//! RELATION   := "left of" | "right of" | "above" | "below"
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Color, Scene, ShapeInstance, ShapeKind};
use super::ShapeworldError;

/// Center offset (pixels) a relation needs before it is considered to hold.
pub const RELATION_MARGIN: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Whether `a` stands in this relation to `b`.
    pub fn holds(self, a: &ShapeInstance, b: &ShapeInstance) -> bool {
        match self {
            Relation::LeftOf => a.cx + RELATION_MARGIN <= b.cx,
            Relation::RightOf => a.cx >= b.cx + RELATION_MARGIN,
            Relation::Above => a.cy + RELATION_MARGIN <= b.cy,
            Relation::Below => a.cy >= b.cy + RELATION_MARGIN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor {
    pub color: Color,
    pub kind: ShapeKind,
}

impl Descriptor {
    pub fn of(s: &ShapeInstance) -> Self {
        Self {
            color: s.color,
            kind: s.kind,
        }
    }

    pub fn matches(&self, s: &ShapeInstance) -> bool {
        s.color == self.color && s.kind == self.kind
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expression {
    Attribute(Descriptor),
    Relational {
        target: Descriptor,
        relation: Relation,
        reference: Descriptor,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    Unique(usize),
    /// Zero or several shapes match.
    Ambiguous {
        count: usize,
    },
}

/// Every word the grammar can emit.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words = vec!["the"];
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(ShapeKind::ALL.iter().map(|k| k.word()));
    for r in Relation::ALL {
        for w in r.words() {
            if !words.contains(w) {
                words.push(w);
            }
        }
    }
    words
}

impl Expression {
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        let push_desc = |out: &mut Vec<String>, d: &Descriptor| {
            out.push("the".into());
            out.push(d.color.word().into());
            out.push(d.kind.word().into());
        };
        match self {
            Expression::Attribute(d) => push_desc(&mut out, d),
            Expression::Relational {
                target,
                relation,
                reference,
            } => {
                push_desc(&mut out, target);
                out.extend(relation.words().iter().map(|w| w.to_string()));
                push_desc(&mut out, reference);
            }
        }
        out
    }

    pub fn is_relational(&self) -> bool {
        matches!(self, Expression::Relational { .. })
    }

    pub fn parse<S: AsRef<str>>(tokens: &[S]) -> Result<Self, ShapeworldError> {
        let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
        let bad = || ShapeworldError::Parse(toks.join(" "));
        let desc = |t: &[&str]| -> Option<Descriptor> {
            match t {
                ["the", c, k] => Some(Descriptor {
                    color: Color::from_word(c)?,
                    kind: ShapeKind::from_word(k)?,
                }),
                _ => None,
            }
        };
        if toks.len() == 3 {
            return desc(&toks).map(Expression::Attribute).ok_or_else(bad);
        }
        if toks.len() < 7 {
            return Err(bad());
        }
        let target = desc(&toks[..3]).ok_or_else(bad)?;
        let rest = &toks[3..];
        let relation = Relation::ALL
            .into_iter()
            .find(|r| rest.starts_with(r.words()))
            .ok_or_else(bad)?;
        let reference = desc(&rest[relation.words().len()..]).ok_or_else(bad)?;
        Ok(Expression::Relational {
            target,
            relation,
            reference,
        })
    }

    /// Shapes the expression describes.
    pub fn matches(&self, scene: &Scene) -> Vec<usize> {
        let shapes = &scene.shapes;
        (0..shapes.len())
            .filter(|&i| match self {
                Expression::Attribute(d) => d.matches(&shapes[i]),
                Expression::Relational {
                    target,
                    relation,
                    reference,
                } => {
                    target.matches(&shapes[i])
                        && shapes
                            .iter()
                            .enumerate()
                            .any(|(j, r)| j != i && reference.matches(r) && relation.holds(&shapes[i], r))
                }
            })
            .collect()
    }
}

/// Which shape, if exactly one, an expression refers to.
pub fn resolve_referent<S: AsRef<str>>(scene: &Scene, tokens: &[S]) -> Result<Resolution, ShapeworldError> {
    let expr = Expression::parse(tokens)?;
    let hits = expr.matches(scene);
    Ok(match hits.as_slice() {
        [only] => Resolution::Unique(*only),
        _ => Resolution::Ambiguous { count: hits.len() },
    })
}

fn descriptor_count(scene: &Scene, d: &Descriptor) -> usize {
    scene.shapes.iter().filter(|s| d.matches(s)).count()
}

/// Builds an expression that resolves uniquely to `target_id`.
///
/// Relational expressions only use references whose own description is
/// unique in the scene; among valid candidates one is drawn with `seed`.
pub fn compose_expression(
    scene: &Scene,
    target_id: usize,
    relational: bool,
    seed: u64,
) -> Result<Expression, ShapeworldError> {
    let target = scene
        .shapes
        .get(target_id)
        .ok_or(ShapeworldError::Composition { target_id })?;
    let td = Descriptor::of(target);
    if !relational {
        let expr = Expression::Attribute(td);
        return match expr.matches(scene).as_slice() {
            [only] if *only == target_id => Ok(expr),
            _ => Err(ShapeworldError::Composition { target_id }),
        };
    }
    let mut candidates = Vec::new();
    for (j, r) in scene.shapes.iter().enumerate() {
        let rd = Descriptor::of(r);
        if j == target_id || rd == td || descriptor_count(scene, &rd) != 1 {
            continue;
        }
        for relation in Relation::ALL {
            if !relation.holds(target, r) {
                continue;
            }
            let expr = Expression::Relational {
                target: td,
                relation,
                reference: rd,
            };
            if expr.matches(scene) == [target_id] {
                candidates.push(expr);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    candidates
        .into_iter()
        .next()
        .ok_or(ShapeworldError::Composition { target_id })
}
