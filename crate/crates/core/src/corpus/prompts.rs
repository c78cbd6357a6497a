//! Concept-query templates and embedding-based prompt filtering.

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt<T: Scalar> {
    pub text: String,
    pub embedding: Tensor<T>,
}

impl<T: Scalar> Prompt<T> {
    pub fn new(text: impl Into<String>, embedding: Tensor<T>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid("prompt text is empty"));
        }
        if embedding.rank() != 1 || embedding.len() == 0 {
            return Err(Error::shape(format!(
                "prompt `{text}`: embedding must be a non-empty vector, got shape {:?}",
                embedding.shape()
            )));
        }
        Ok(Prompt { text, embedding })
    }
}

/// One positive prompt and at least one negative, all embedded in the same
/// space; used to keep only images the positive prompt describes best.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet<T: Scalar> {
    category: String,
    positive: Prompt<T>,
    negatives: Vec<Prompt<T>>,
}

impl<T: Scalar> PromptSet<T> {
    pub fn new(
        category: impl Into<String>,
        positive: Prompt<T>,
        negatives: Vec<Prompt<T>>,
    ) -> Result<Self> {
        let category = category.into();
        if category.trim().is_empty() {
            return Err(Error::invalid("prompt set category is empty"));
        }
        if negatives.is_empty() {
            return Err(Error::invalid(format!(
                "prompt set `{category}` needs at least one negative prompt"
            )));
        }
        let dim = positive.embedding.len();
        for n in &negatives {
            if n.embedding.len() != dim {
                return Err(Error::shape(format!(
                    "prompt `{}` has dimension {}, expected {dim}",
                    n.text,
                    n.embedding.len()
                )));
            }
        }
        Ok(PromptSet { category, positive, negatives })
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn positive(&self) -> &Prompt<T> {
        &self.positive
    }

    pub fn negatives(&self) -> &[Prompt<T>] {
        &self.negatives
    }

    pub fn dim(&self) -> usize {
        self.positive.embedding.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedImage {
    pub id: String,
    /// The negative prompt that matched at least as well as the positive.
    pub winning_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutcome {
    pub retained: Vec<String>,
    pub rejected: Vec<RejectedImage>,
}

fn cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: embedding shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let dot: T = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum();
    let na: T = a.data().iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.data().iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::invalid(format!("{what}: zero-norm embedding")));
    }
    Ok(dot / (na * nb))
}

/// Retains an image iff the positive prompt's cosine similarity is strictly
/// greater than every negative's; ties reject. Rejected entries carry the
/// first negative prompt attaining the best negative similarity.
pub fn filter_by_prompt_argmax<T: Scalar>(
    embeddings: &[(String, Tensor<T>)],
    prompts: &PromptSet<T>,
) -> Result<FilterOutcome> {
    let mut retained = Vec::new();
    let mut rejected = Vec::new();
    for (id, embedding) in embeddings {
        let pos = cosine(embedding, &prompts.positive.embedding, &format!("image `{id}`"))?;
        let mut best: Option<(T, &str)> = None;
        for n in &prompts.negatives {
            let sim = cosine(embedding, &n.embedding, &format!("image `{id}`"))?;
            if best.map_or(true, |(b, _)| sim > b) {
                best = Some((sim, &n.text));
            }
        }
        let (best_neg, winner) = best.expect("validated: at least one negative");
        if pos > best_neg {
            retained.push(id.clone());
        } else {
            rejected.push(RejectedImage { id: id.clone(), winning_prompt: winner.to_string() });
        }
    }
    Ok(FilterOutcome { retained, rejected })
}

/// Emits the scene-query cross product "{category} {object} in a {place}"
/// followed by close-up queries "A close-up shot of {category} {object}"
/// (or the bare category when no objects are given).
pub fn emit_concept_query_templates(
    category: &str,
    objects: &[String],
    places: &[String],
) -> Result<Vec<String>> {
    if category.trim().is_empty() {
        return Err(Error::invalid("query category is empty"));
    }
    let mut out = Vec::new();
    for object in objects {
        for place in places {
            out.push(format!("{category} {object} in a {place}"));
        }
    }
    if objects.is_empty() {
        out.push(format!("A close-up shot of {category}"));
    } else {
        for object in objects {
            out.push(format!("A close-up shot of {category} {object}"));
        }
    }
    Ok(out)
}
