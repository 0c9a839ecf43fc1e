use crome_autodiff::{AutodiffError, Var};

use crate::config::SequenceOrder;
use crate::error::Result;
use crate::session::Session;

/// Concatenates the LM prefix. With the default order the sequence is
/// `[question ∥ text-branch ∥ image-branch]`; any segment may be empty.
pub fn assemble_llm_input(
    s: &mut Session,
    order: SequenceOrder,
    question: Var,
    text: Var,
    image: Var,
) -> Result<Var> {
    let d = s.graph.value(question).cols();
    for v in [text, image] {
        if s.graph.value(v).cols() != d {
            return Err(AutodiffError::Shape {
                op: "assemble_llm_input",
                lhs: s.graph.shape(question).to_vec(),
                rhs: s.graph.shape(v).to_vec(),
            }
            .into());
        }
    }
    let parts = match order {
        SequenceOrder::QuestionTextImage => [question, text, image],
        SequenceOrder::TextImageQuestion => [text, image, question],
    };
    Ok(s.graph.concat_rows(&parts)?)
}
