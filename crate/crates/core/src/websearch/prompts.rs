use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{estimate_tokens, WebContext, WebSearchError};
use crate::retrieval::NeighborResult;

pub const TEMPLATE_VERSION: &str = "v1";

const LOCATE: &str = include_str!("../../assets/prompts/v1/locate.txt");
const ANSWER_DESCRIPTION: &str = include_str!("../../assets/prompts/v1/answer_description.txt");
const ANSWER_COORDINATES: &str = include_str!("../../assets/prompts/v1/answer_coordinates.txt");
const GEOCODE_FALLBACK: &str = include_str!("../../assets/prompts/v1/geocode_fallback.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSpec {
    pub n: usize,
    /// Nearest-neighbor coordinates embedded in each variant.
    pub schedule: Vec<usize>,
    /// Web contexts embedded in every variant.
    pub m: usize,
    /// Whether the variant with the largest schedule entry also lists the farthest set.
    pub farthest_in_richest: bool,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            n: 4,
            schedule: vec![0, 5, 10, 15],
            m: 5,
            farthest_in_richest: true,
        }
    }
}

impl PromptSpec {
    pub fn validate(&self) -> Result<(), WebSearchError> {
        if self.n == 0 {
            return Err(WebSearchError::NoVariants);
        }
        if self.schedule.len() != self.n {
            return Err(WebSearchError::ScheduleMismatch {
                n: self.n,
                schedule: self.schedule.len(),
            });
        }
        Ok(())
    }

    fn richest(&self) -> usize {
        let max = self.schedule.iter().copied().max().unwrap_or(0);
        self.schedule.iter().position(|&s| s == max).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Description,
    Coordinates,
}

/// Which evidence a prompt carries and what it asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMode {
    pub coordinates: bool,
    pub contexts: bool,
    pub output: OutputKind,
}

impl PromptMode {
    pub fn full() -> Self {
        Self {
            coordinates: true,
            contexts: true,
            output: OutputKind::Description,
        }
    }

    /// Closed-world evidence only; produces the baseline prediction.
    pub fn baseline() -> Self {
        Self {
            contexts: false,
            ..Self::full()
        }
    }

    pub fn no_closed_world() -> Self {
        Self {
            coordinates: false,
            ..Self::full()
        }
    }

    pub fn direct_coordinates() -> Self {
        Self {
            output: OutputKind::Coordinates,
            ..Self::full()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub variant: usize,
    pub template_version: String,
    pub text: String,
    pub n_near: usize,
    pub n_far: usize,
    pub n_contexts: usize,
    pub output: OutputKind,
}

impl RenderedPrompt {
    pub fn n_coords(&self) -> usize {
        self.n_near + self.n_far
    }

    pub fn estimated_tokens(&self) -> u64 {
        estimate_tokens(self.n_coords() as u64, self.n_contexts as u64)
    }
}

pub fn build_prompts(
    neighbors: &NeighborResult,
    contexts: &[WebContext],
    spec: &PromptSpec,
    mode: PromptMode,
) -> Result<Vec<RenderedPrompt>, WebSearchError> {
    spec.validate()?;
    let richest = spec.richest();
    let contexts: &[WebContext] = if mode.contexts {
        &contexts[..contexts.len().min(spec.m)]
    } else {
        &[]
    };
    let instruction = match mode.output {
        OutputKind::Description => ANSWER_DESCRIPTION,
        OutputKind::Coordinates => ANSWER_COORDINATES,
    };

    Ok(spec
        .schedule
        .iter()
        .enumerate()
        .map(|(variant, &count)| {
            let (near, far) = if mode.coordinates {
                let near = &neighbors.nearest[..count.min(neighbors.nearest.len())];
                let far: &[_] = if spec.farthest_in_richest && variant == richest {
                    &neighbors.farthest
                } else {
                    &[]
                };
                (near, far)
            } else {
                (&[][..], &[][..])
            };

            let mut evidence = String::new();
            if !near.is_empty() {
                evidence.push_str("Coordinates of visually similar reference photos:\n");
                for n in near {
                    let _ = writeln!(evidence, "near: {:.6}, {:.6}", n.gps.lat(), n.gps.lon());
                }
            }
            if !far.is_empty() {
                evidence.push_str("Coordinates of visually dissimilar reference photos (unlikely locations):\n");
                for n in far {
                    let _ = writeln!(evidence, "far: {:.6}, {:.6}", n.gps.lat(), n.gps.lon());
                }
            }
            if !contexts.is_empty() {
                evidence.push_str("Text from web pages showing the same or a similar photo:\n");
                for (k, c) in contexts.iter().enumerate() {
                    let title = c.title.split_whitespace().collect::<Vec<_>>().join(" ");
                    let _ = writeln!(evidence, "[web {}] {title}", k + 1);
                    for line in c.text.lines() {
                        let _ = writeln!(evidence, "  {line}");
                    }
                }
            }
            if evidence.is_empty() {
                evidence.push_str("No additional evidence is available.\n");
            }

            let text = LOCATE
                .replace("{{evidence}}\n", &evidence)
                .replace("{{instruction}}\n", instruction);
            RenderedPrompt {
                variant,
                template_version: TEMPLATE_VERSION.to_string(),
                text,
                n_near: near.len(),
                n_far: far.len(),
                n_contexts: contexts.len(),
                output: mode.output,
            }
        })
        .collect())
}

pub fn render_fallback_prompt(description: &str) -> String {
    let one_line = description.split_whitespace().collect::<Vec<_>>().join(" ");
    GEOCODE_FALLBACK.replace("{{description}}", &one_line)
}
