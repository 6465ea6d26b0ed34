//! BIO tag parsing and chunk extraction.
//!
//! Extraction follows the lenient (default) chunking convention: a chunk of
//! type `t` starts at `B-t`, or at `I-t` when the previous token was outside,
//! the sequence start, or a different type; it continues through consecutive
//! `I-t` of the same type, and `B-t` always begins a new chunk.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BioError {
    #[error("malformed tag {tag:?} at position {position}")]
    MalformedTag { position: usize, tag: String },
}

/// An extracted entity: inclusive token span plus its type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str, position: usize) -> Result<Tag<'_>, BioError> {
    if tag == "O" {
        return Ok(Tag::Outside);
    }
    if let Some(rest) = tag.strip_prefix("B-") {
        if !rest.is_empty() {
            return Ok(Tag::Begin(rest));
        }
    }
    if let Some(rest) = tag.strip_prefix("I-") {
        if !rest.is_empty() {
            return Ok(Tag::Inside(rest));
        }
    }
    Err(BioError::MalformedTag {
        position,
        tag: tag.to_string(),
    })
}

pub fn bio_extract<T: AsRef<str>>(tags: &[T]) -> Result<Vec<EntitySpan>, BioError> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, raw) in tags.iter().enumerate() {
        let tag = parse_tag(raw.as_ref(), i)?;
        match tag {
            Tag::Outside => {
                if let Some((start, label)) = open.take() {
                    spans.push(EntitySpan {
                        start,
                        end: i - 1,
                        label,
                    });
                }
            }
            Tag::Begin(t) => {
                if let Some((start, label)) = open.take() {
                    spans.push(EntitySpan {
                        start,
                        end: i - 1,
                        label,
                    });
                }
                open = Some((i, t.to_string()));
            }
            Tag::Inside(t) => match &open {
                Some((_, label)) if label == t => {}
                _ => {
                    if let Some((start, label)) = open.take() {
                        spans.push(EntitySpan {
                            start,
                            end: i - 1,
                            label,
                        });
                    }
                    open = Some((i, t.to_string()));
                }
            },
        }
    }
    if let Some((start, label)) = open {
        spans.push(EntitySpan {
            start,
            end: tags.len() - 1,
            label,
        });
    }
    Ok(spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(start: usize, end: usize, label: &str) -> EntitySpan {
        EntitySpan {
            start,
            end,
            label: label.to_string(),
        }
    }

    #[test]
    fn canonical_chunk() {
        let spans = bio_extract(&["B-age", "I-age", "O"]).unwrap();
        assert_eq!(spans, vec![span(0, 1, "age")]);
    }

    #[test]
    fn orphan_inside_starts_a_chunk() {
        let spans = bio_extract(&["I-x", "I-x"]).unwrap();
        assert_eq!(spans, vec![span(0, 1, "x")]);
    }

    #[test]
    fn begin_always_starts_a_new_chunk() {
        let spans = bio_extract(&["B-x", "B-x"]).unwrap();
        assert_eq!(spans, vec![span(0, 0, "x"), span(1, 1, "x")]);
    }

    #[test]
    fn type_change_splits_chunks() {
        let spans = bio_extract(&["B-x", "I-y", "I-y", "O", "I-z"]).unwrap();
        assert_eq!(
            spans,
            vec![span(0, 0, "x"), span(1, 2, "y"), span(4, 4, "z")]
        );
    }

    #[test]
    fn malformed_tags_name_the_position() {
        for (tags, bad) in [
            (vec!["O", "X-foo"], 1),
            (vec!["B-"], 0),
            (vec!["O", "O", "i-x"], 2),
            (vec!["b"], 0),
        ] {
            let err = bio_extract(&tags).unwrap_err();
            assert_eq!(
                err,
                BioError::MalformedTag {
                    position: bad,
                    tag: tags[bad].to_string()
                }
            );
        }
    }

    #[test]
    fn spans_are_sorted_disjoint_and_in_bounds() {
        // Exhaustive over all tag sequences of length 5 from a small alphabet.
        let alphabet = ["O", "B-a", "I-a", "B-b", "I-b"];
        let mut stack = vec![Vec::<&str>::new()];
        while let Some(seq) = stack.pop() {
            if seq.len() == 5 {
                let spans = bio_extract(&seq).unwrap();
                let mut last_end = None;
                for s in &spans {
                    assert!(s.start <= s.end && s.end < seq.len());
                    if let Some(prev) = last_end {
                        assert!(s.start > prev, "overlap in {seq:?}");
                    }
                    last_end = Some(s.end);
                }
                continue;
            }
            for t in alphabet {
                let mut next = seq.clone();
                next.push(t);
                stack.push(next);
            }
        }
    }
}
