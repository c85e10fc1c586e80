//! Two-prompt captioning pipeline over a pluggable text-generation client.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::InfractionLog;
use crate::error::{Result, VlaadError};

pub const SUMMARIZE_TEMPLATE: &str = "Summarize the following text:\n{input_text}\nOnly output the summarized message with nothing before it.";

pub const PARAPHRASE_TEMPLATE: &str = "Paraphrase the following text while keeping the original meaning:\n{input_text}\nOnly output the paraphrased message with nothing before it. The word drive must be in your response.";

pub const DEFAULT_MODELS: [&str; 2] = ["llama3.2:3b", "gemma2:2b"];

const MAX_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum ClientError {
    Timeout,
    Unreachable(String),
    Other(String),
}

impl ClientError {
    fn is_transient(&self) -> bool {
        matches!(self, ClientError::Timeout | ClientError::Unreachable(_))
    }
}

pub trait SummarizerClient {
    fn generate(&self, model: &str, prompt: &str) -> std::result::Result<String, ClientError>;
}

/// Echoes the first sentence of the prompt's input text.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubSummarizer;

impl StubSummarizer {
    /// The lines between a template's instruction line and its trailing line.
    pub fn input_text(prompt: &str) -> &str {
        let start = prompt.find('\n').map_or(0, |i| i + 1);
        let end = prompt.rfind('\n').filter(|&e| e >= start).unwrap_or(prompt.len());
        &prompt[start..end]
    }

    pub fn first_sentence(text: &str) -> String {
        let text = text.trim();
        let mut chars = text.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            if matches!(c, '.' | '!' | '?') {
                match chars.peek() {
                    None => return text.to_string(),
                    Some((_, n)) if n.is_whitespace() => return text[..=i].to_string(),
                    _ => {}
                }
            }
        }
        text.to_string()
    }
}

impl SummarizerClient for StubSummarizer {
    fn generate(&self, _model: &str, prompt: &str) -> std::result::Result<String, ClientError> {
        Ok(Self::first_sentence(Self::input_text(prompt)))
    }
}

/// Client for an Ollama-style `POST {base}/api/generate` endpoint.
#[derive(Debug, Clone)]
pub struct HttpSummarizer {
    base_url: String,
    timeout: Duration,
}

#[derive(Deserialize)]
struct GenerateResponse {
    response: String,
}

impl HttpSummarizer {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout,
        }
    }

    /// Reads the endpoint from `VLAAD_SUMMARIZER_URL`.
    pub fn from_env(timeout: Duration) -> Option<Self> {
        std::env::var("VLAAD_SUMMARIZER_URL")
            .ok()
            .filter(|u| !u.is_empty())
            .map(|u| Self::new(u, timeout))
    }
}

impl SummarizerClient for HttpSummarizer {
    fn generate(&self, model: &str, prompt: &str) -> std::result::Result<String, ClientError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = serde_json::json!({ "model": model, "prompt": prompt, "stream": false });
        let mut resp = agent
            .post(&format!("{}/api/generate", self.base_url))
            .send_json(&body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => ClientError::Timeout,
                ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
                    ClientError::Unreachable(e.to_string())
                }
                other => ClientError::Other(other.to_string()),
            })?;
        let parsed: GenerateResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Other(e.to_string()))?;
        Ok(parsed.response)
    }
}

pub fn contains_drive(text: &str) -> bool {
    text.to_lowercase().contains("drive")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalCaption {
    pub text: String,
    /// Set when the paraphrase still lacked the required word after one re-query.
    pub constraint_warning: bool,
}

/// Issues prompts against one of two models chosen with equal probability
/// per call.
pub struct Captioner<'c, C: SummarizerClient + ?Sized> {
    client: &'c C,
    models: [String; 2],
    rng: ChaCha8Rng,
    model_counts: [usize; 2],
}

impl<'c, C: SummarizerClient + ?Sized> Captioner<'c, C> {
    pub fn new(client: &'c C, models: [String; 2], seed: u64) -> Self {
        Self {
            client,
            models,
            rng: ChaCha8Rng::seed_from_u64(seed),
            model_counts: [0, 0],
        }
    }

    pub fn with_default_models(client: &'c C, seed: u64) -> Self {
        Self::new(client, DEFAULT_MODELS.map(String::from), seed)
    }

    pub fn model_counts(&self) -> [usize; 2] {
        self.model_counts
    }

    fn query(&mut self, template: &str, input: &str) -> Result<String> {
        let which = usize::from(self.rng.random_bool(0.5));
        self.model_counts[which] += 1;
        let model = &self.models[which];
        let prompt = template.replace("{input_text}", input);
        let mut last_err = None;
        for _ in 0..=MAX_RETRIES {
            match self.client.generate(model, &prompt) {
                Ok(text) => {
                    let text = text.trim();
                    if text.is_empty() {
                        return Err(VlaadError::Summarizer(format!("{model} returned an empty response")));
                    }
                    return Ok(text.to_string());
                }
                Err(e) if e.is_transient() => last_err = Some(e),
                Err(e) => return Err(VlaadError::Summarizer(format!("{model}: {e:?}"))),
            }
        }
        Err(VlaadError::Summarizer(format!(
            "{model}: giving up after {MAX_RETRIES} retries ({:?})",
            last_err.expect("at least one attempt")
        )))
    }

    pub fn caption_collision_clip(&mut self, log: &InfractionLog) -> Result<String> {
        let input = format!("{}\nScenario: {}", log.message.trim(), log.scenario_type);
        self.query(SUMMARIZE_TEMPLATE, &input)
    }

    /// Summarizes each frame annotation, then summarizes the concatenated
    /// frame summaries; optionally paraphrases the result under the
    /// "drive" constraint with a single re-query.
    pub fn caption_normal_clip(&mut self, annotations: &[String], paraphrase: bool) -> Result<NormalCaption> {
        if annotations.is_empty() {
            return Err(VlaadError::Empty("frame annotations"));
        }
        let per_frame = annotations
            .iter()
            .map(|a| self.query(SUMMARIZE_TEMPLATE, a))
            .collect::<Result<Vec<_>>>()?;
        let clip = self.query(SUMMARIZE_TEMPLATE, &per_frame.join(" "))?;
        if !paraphrase {
            return Ok(NormalCaption {
                text: clip,
                constraint_warning: false,
            });
        }
        let first = self.query(PARAPHRASE_TEMPLATE, &clip)?;
        if contains_drive(&first) {
            return Ok(NormalCaption {
                text: first,
                constraint_warning: false,
            });
        }
        let second = self.query(PARAPHRASE_TEMPLATE, &clip)?;
        let ok = contains_drive(&second);
        Ok(NormalCaption {
            text: second,
            constraint_warning: !ok,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::cell::{Cell, RefCell};

    use super::*;
    use crate::datakit::InfractionType;

    struct Scripted {
        reply: std::result::Result<String, ClientError>,
        calls: Cell<usize>,
        prompts: RefCell<Vec<String>>,
    }

    impl Scripted {
        fn new(reply: std::result::Result<String, ClientError>) -> Self {
            Self {
                reply,
                calls: Cell::new(0),
                prompts: RefCell::new(Vec::new()),
            }
        }
    }

    impl SummarizerClient for Scripted {
        fn generate(&self, _model: &str, prompt: &str) -> std::result::Result<String, ClientError> {
            self.calls.set(self.calls.get() + 1);
            self.prompts.borrow_mut().push(prompt.to_string());
            self.reply.clone()
        }
    }

    fn log() -> InfractionLog {
        InfractionLog {
            frame_number: 120,
            infraction_type: InfractionType::Vehicle,
            message: "Agent collided against object with type=vehicle.lincoln.mkz and id=2231. \
                      The ego car was turning left."
                .into(),
            scenario_type: "SignalizedJunctionLeftTurn".into(),
        }
    }

    #[test]
    fn stub_collision_caption_is_first_sentence() {
        let stub = StubSummarizer;
        let mut c = Captioner::with_default_models(&stub, 0);
        let cap = c.caption_collision_clip(&log()).unwrap();
        assert_eq!(cap, "Agent collided against object with type=vehicle.lincoln.mkz and id=2231.");
        let mut c2 = Captioner::with_default_models(&stub, 99);
        assert_eq!(c2.caption_collision_clip(&log()).unwrap(), cap);
    }

    #[test]
    fn prompt_uses_exact_template() {
        let client = Scripted::new(Ok("summary".into()));
        let mut c = Captioner::with_default_models(&client, 0);
        c.caption_collision_clip(&log()).unwrap();
        let p = &client.prompts.borrow()[0];
        assert!(p.starts_with("Summarize the following text:\nAgent collided"));
        assert!(p.ends_with("\nOnly output the summarized message with nothing before it."));
        assert!(p.contains("Scenario: SignalizedJunctionLeftTurn"));
    }

    #[test]
    fn timeouts_retry_three_times() {
        let client = Scripted::new(Err(ClientError::Timeout));
        let mut c = Captioner::with_default_models(&client, 0);
        assert!(c.caption_collision_clip(&log()).is_err());
        assert_eq!(client.calls.get(), 1 + MAX_RETRIES);
    }

    #[test]
    fn empty_response_is_an_error() {
        let client = Scripted::new(Ok("   ".into()));
        let mut c = Captioner::with_default_models(&client, 0);
        assert!(c.caption_collision_clip(&log()).is_err());
        assert_eq!(client.calls.get(), 1);
    }

    #[test]
    fn two_stage_stub_composition() {
        let stub = StubSummarizer;
        let mut c = Captioner::with_default_models(&stub, 1);
        let ann = vec![
            "A car is parked on the right. The light is green.".to_string(),
            "The ego vehicle accelerates gently! Traffic is light.".to_string(),
        ];
        let out = c.caption_normal_clip(&ann, false).unwrap();
        let stage1: Vec<String> = ann.iter().map(|a| StubSummarizer::first_sentence(a)).collect();
        let want = StubSummarizer::first_sentence(&stage1.join(" "));
        assert_eq!(out.text, want);
        assert!(!out.constraint_warning);

        let single = c.caption_normal_clip(&ann[..1], false).unwrap();
        assert!(!single.text.is_empty());
    }

    #[test]
    fn paraphrase_constraint_requeries_once() {
        let client = Scripted::new(Ok("The car moves along the street.".into()));
        let mut c = Captioner::with_default_models(&client, 0);
        let out = c.caption_normal_clip(&["frame one".to_string()], true).unwrap();
        // stage 1 + stage 2 + paraphrase + one re-query
        assert_eq!(client.calls.get(), 4);
        assert!(out.constraint_warning);
        assert_eq!(out.text, "The car moves along the street.");
    }

    #[test]
    fn paraphrase_constraint_satisfied() {
        let client = Scripted::new(Ok("We drive along the street.".into()));
        let mut c = Captioner::with_default_models(&client, 0);
        let out = c.caption_normal_clip(&["frame one".to_string()], true).unwrap();
        assert_eq!(client.calls.get(), 3);
        assert!(!out.constraint_warning);
    }

    #[test]
    fn model_choice_is_balanced() {
        let stub = StubSummarizer;
        let mut c = Captioner::with_default_models(&stub, 2024);
        for _ in 0..1000 {
            c.caption_collision_clip(&log()).unwrap();
        }
        let [a, b] = c.model_counts();
        assert_eq!(a + b, 1000);
        assert!((450..=550).contains(&a), "{a}");
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        let client = HttpSummarizer::new("http://127.0.0.1:1", Duration::from_millis(500));
        let mut c = Captioner::with_default_models(&client, 0);
        let err = c.caption_collision_clip(&log()).unwrap_err().to_string();
        assert!(err.contains("retries"), "{err}");
    }
}
