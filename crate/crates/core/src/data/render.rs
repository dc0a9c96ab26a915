use super::corpus::{Dialogue, Role};
use crate::error::{Error, Result};
use crate::model::vocab::{Vocabulary, BOS, DOCTOR, EOS, PATIENT};

/// Token ids of a dialogue with a parallel loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub tokens: Vec<usize>,
    /// True exactly on doctor text tokens and the EOS closing each doctor
    /// turn.
    pub mask: Vec<bool>,
}

impl Rendered {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Next-token view: inputs, targets and the target-side mask.
    pub fn shifted(&self) -> (&[usize], &[usize], &[bool]) {
        let n = self.tokens.len();
        (&self.tokens[..n - 1], &self.tokens[1..], &self.mask[1..])
    }
}

fn segment(vocab: &Vocabulary, role: Role, text: &str) -> (Vec<usize>, Vec<bool>) {
    let body = vocab.encode_plain(text);
    let doctor = role == Role::Doctor;
    let mut toks = Vec::with_capacity(body.len() + 2);
    toks.push(if doctor { DOCTOR } else { PATIENT });
    toks.extend(body);
    if doctor {
        toks.push(EOS);
    }
    let mut mask = vec![doctor; toks.len()];
    mask[0] = false;
    (toks, mask)
}

/// Renders `BOS` then, per turn, a role marker and the turn text (doctor
/// turns closed by EOS). If the result exceeds `context_length`, whole turns
/// are dropped oldest-first; a final doctor turn that alone does not fit is
/// cut at its tail.
pub fn render_template(d: &Dialogue, vocab: &Vocabulary, context_length: usize) -> Result<Rendered> {
    match d.turns.last() {
        Some(t) if t.role == Role::Doctor && !t.text.trim().is_empty() => {}
        _ => {
            return Err(Error::Contract(format!(
                "dialogue `{}` does not end with a non-empty doctor turn",
                d.id
            )))
        }
    }
    if context_length < 2 {
        return Err(Error::Config("context length must be at least 2".into()));
    }
    let segments: Vec<_> = d.turns.iter().map(|t| segment(vocab, t.role, &t.text)).collect();
    let budget = context_length - 1;
    let mut start = segments.len();
    let mut used = 0;
    while start > 0 && used + segments[start - 1].0.len() <= budget {
        used += segments[start - 1].0.len();
        start -= 1;
    }
    let mut tokens = vec![BOS];
    let mut mask = vec![false];
    if start == segments.len() {
        let (t, m) = &segments[segments.len() - 1];
        tokens.extend(&t[..budget]);
        mask.extend(&m[..budget]);
    } else {
        for (t, m) in &segments[start..] {
            tokens.extend(t);
            mask.extend(m);
        }
    }
    Ok(Rendered { tokens, mask })
}

/// Joins framed prompt ids (`BOS … DOCTOR`) and response ids into one
/// sequence of at most `context_length` tokens. Whole history turns are
/// dropped oldest-first; if the trailing cue and response alone overflow,
/// the response keeps its head. Returns the tokens and the prompt length.
pub fn fit_prompt_response(prompt: &[usize], response: &[usize], context_length: usize) -> Result<(Vec<usize>, usize)> {
    if response.is_empty() {
        return Err(Error::Contract("empty response".into()));
    }
    let body = match prompt.first() {
        Some(&BOS) => &prompt[1..],
        _ => prompt,
    };
    let mut starts: Vec<usize> = body
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == PATIENT || t == DOCTOR)
        .map(|(i, _)| i)
        .collect();
    if starts.first() != Some(&0) {
        starts.insert(0, 0);
    }
    let budget = context_length.saturating_sub(1);
    let last = *starts.last().expect("at least one segment");
    let cue = &body[last..];
    if cue.len() + 1 > budget {
        return Err(Error::ContextLength { len: cue.len() + 2, max: context_length });
    }
    let mut tokens = vec![BOS];
    if cue.len() + response.len() > budget {
        tokens.extend_from_slice(cue);
        let plen = tokens.len();
        tokens.extend_from_slice(&response[..budget - cue.len()]);
        return Ok((tokens, plen));
    }
    let room = budget - response.len();
    let keep_from = starts
        .iter()
        .copied()
        .find(|&s| body.len() - s <= room)
        .unwrap_or(last);
    tokens.extend_from_slice(&body[keep_from..]);
    let plen = tokens.len();
    tokens.extend_from_slice(response);
    Ok((tokens, plen))
}
