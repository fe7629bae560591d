//! Context cleaning and selection before answer synthesis.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::model::{token_count, FilterStatus, Instruction, RetrievedContext};
use crate::prompts::{PromptTemplate, TemplateError};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    RulesOnly,
    #[default]
    RulesThenLlm,
}

fn default_max_keep() -> usize {
    3
}
fn default_budget() -> usize {
    3000
}
fn default_min_chunk_chars() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default)]
    pub mode: FilterMode,
    #[serde(default = "default_max_keep")]
    pub max_keep: usize,
    #[serde(default = "default_budget")]
    pub context_token_budget: usize,
    #[serde(default = "default_min_chunk_chars")]
    pub min_chunk_chars: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mode: FilterMode::default(),
            max_keep: default_max_keep(),
            context_token_budget: default_budget(),
            min_chunk_chars: default_min_chunk_chars(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_keep < 1 {
            return Err("filter.max_keep must be >= 1".into());
        }
        if self.context_token_budget == 0 {
            return Err("filter.context_token_budget must be > 0".into());
        }
        Ok(())
    }
}

/// Elements whose whole subtree is noise.
const DROP_REGIONS: &[&str] = &[
    "script", "style", "nav", "footer", "header", "aside", "form", "noscript", "template", "iframe", "svg",
];

/// Elements that separate words when removed.
const BLOCK_ELEMENTS: &[&str] = &[
    "address",
    "article",
    "blockquote",
    "br",
    "dd",
    "div",
    "dl",
    "dt",
    "fieldset",
    "figcaption",
    "figure",
    "h1",
    "h2",
    "h3",
    "h4",
    "h5",
    "h6",
    "hr",
    "li",
    "main",
    "ol",
    "p",
    "pre",
    "section",
    "table",
    "tbody",
    "td",
    "tfoot",
    "th",
    "thead",
    "tr",
    "ul",
    "body",
    "html",
    "head",
    "title",
    "option",
    "select",
    "img",
    "input",
    "button",
];

fn find_ci(haystack: &str, needle: &str, from: usize) -> Option<usize> {
    let hay = haystack.as_bytes();
    let needle = needle.as_bytes();
    if needle.is_empty() || hay.len() < needle.len() {
        return None;
    }
    (from..=hay.len() - needle.len()).find(|&i| hay[i..i + needle.len()].eq_ignore_ascii_case(needle))
}

/// Strips markup from `raw`: tags and attributes are removed, noise regions
/// (scripts, styles, navigation, comments, ...) are dropped entirely,
/// character entities are decoded once, and whitespace is collapsed.
///
/// Decoding happens exactly once per call, so feeding the output back in is
/// not a no-op for double-escaped input; use [`clean_context`], which tracks
/// status, when re-application is possible.
pub fn rule_filter(raw: &str) -> String {
    let bytes = raw.as_bytes();
    let mut out = String::with_capacity(raw.len());
    let mut pos = 0;
    while pos < raw.len() {
        if raw[pos..].starts_with("<!--") {
            pos = raw[pos + 4..].find("-->").map_or(raw.len(), |i| pos + 4 + i + 3);
            out.push(' ');
            continue;
        }
        let next = bytes.get(pos + 1).copied();
        let is_tag_start = bytes[pos] == b'<'
            && matches!(next, Some(c) if c.is_ascii_alphabetic() || c == b'/' || c == b'!' || c == b'?');
        if !is_tag_start {
            let ch = raw[pos..].chars().next().expect("in bounds");
            out.push(ch);
            pos += ch.len_utf8();
            continue;
        }

        let closing = next == Some(b'/');
        let name_start = pos + 1 + usize::from(closing);
        let name_len = raw[name_start..]
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == ':'))
            .unwrap_or(raw.len() - name_start);
        let name = raw[name_start..name_start + name_len].to_ascii_lowercase();

        // Tag ends at the next '>' unless another '<' starts first, in which
        // case the tag is malformed and only its name token is removed.
        let gt = raw[pos + 1..].find('>').map(|i| pos + 1 + i);
        let lt = raw[pos + 1..].find('<').map(|i| pos + 1 + i);
        let tag_end = match (gt, lt) {
            (Some(g), Some(l)) if l < g => name_start + name_len,
            (Some(g), _) => g + 1,
            (None, _) => name_start + name_len,
        };
        let self_closing = tag_end > 1 && raw[..tag_end].ends_with("/>");

        if !closing && !self_closing && DROP_REGIONS.contains(&name.as_str()) {
            let close = format!("</{name}");
            pos = match find_ci(raw, &close, tag_end) {
                Some(i) => raw[i..].find('>').map_or(raw.len(), |j| i + j + 1),
                None => raw.len(),
            };
            out.push(' ');
            continue;
        }
        if BLOCK_ELEMENTS.contains(&name.as_str()) || name.is_empty() {
            out.push(' ');
        }
        pos = tag_end.max(pos + 1);
    }

    let decoded = html_escape::decode_html_entities(&out);
    let mut collapsed = String::with_capacity(decoded.len());
    for token in decoded.split_whitespace() {
        if !collapsed.is_empty() {
            collapsed.push(' ');
        }
        collapsed.push_str(token);
    }
    neutralize_tags(&collapsed)
}

/// Decoded entities such as `&lt;b&gt;` must not reintroduce tag-like text.
fn neutralize_tags(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        out.push(c);
        if c == '<' && matches!(chars.peek(), Some(n) if n.is_ascii_alphabetic()) {
            out.push(' ');
        }
    }
    out
}

/// True when no `<` is immediately followed by an ASCII letter.
pub fn is_tag_free(text: &str) -> bool {
    !text
        .as_bytes()
        .windows(2)
        .any(|w| w[0] == b'<' && w[1].is_ascii_alphabetic())
}

/// Applies [`rule_filter`] to a raw context and marks it `rule_cleaned`.
/// Contexts past the raw state are returned unchanged.
pub fn clean_context(mut ctx: RetrievedContext) -> RetrievedContext {
    if ctx.filter_status == FilterStatus::Raw {
        ctx.chunk_text = rule_filter(&ctx.chunk_text);
        ctx.filter_status = FilterStatus::RuleCleaned;
    }
    ctx
}

/// 1-based passage numbers in the order they appear in `response`.
fn parse_indices(response: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut current: Option<usize> = None;
    for c in response.chars() {
        match c.to_digit(10) {
            Some(d) => current = Some(current.unwrap_or(0).saturating_mul(10).saturating_add(d as usize)),
            None => {
                if let Some(n) = current.take() {
                    out.push(n);
                }
            }
        }
    }
    out.extend(current);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Kept contexts in selection order, status `kept`.
    pub kept: Vec<RetrievedContext>,
    /// Everything else, status `dropped`.
    pub dropped: Vec<RetrievedContext>,
    pub warning: Option<String>,
}

fn split_selection(contexts: Vec<RetrievedContext>, order: &[usize], warning: Option<String>) -> Selection {
    let mut slots: Vec<Option<RetrievedContext>> = contexts.into_iter().map(Some).collect();
    let mut kept = Vec::with_capacity(order.len());
    for &i in order {
        if let Some(mut ctx) = slots[i].take() {
            ctx.filter_status = FilterStatus::Kept;
            kept.push(ctx);
        }
    }
    let dropped = slots
        .into_iter()
        .flatten()
        .map(|mut c| {
            c.filter_status = FilterStatus::Dropped;
            c
        })
        .collect();
    Selection { kept, dropped, warning }
}

fn top_by_rank(contexts: &[RetrievedContext], max_keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..contexts.len()).collect();
    idx.sort_by_key(|&i| (contexts[i].rank, i));
    idx.truncate(max_keep);
    idx
}

/// Keeps the best `max_keep` contexts by retrieval rank.
pub fn select_by_rank(contexts: Vec<RetrievedContext>, max_keep: usize) -> Selection {
    let order = top_by_rank(&contexts, max_keep);
    split_selection(contexts, &order, None)
}

/// Asks the model which numbered chunks are relevant and keeps at most
/// `max_keep` in the returned order. Out-of-range and repeated numbers are
/// ignored; if nothing valid remains, falls back to retrieval rank.
pub fn llm_rank_chunks(
    instruction: &Instruction,
    contexts: Vec<RetrievedContext>,
    gateway: &Gateway,
    template: &PromptTemplate,
    max_keep: usize,
) -> Result<Selection, FilterError> {
    if contexts.is_empty() {
        return Ok(split_selection(contexts, &[], None));
    }
    let chunks = contexts
        .iter()
        .enumerate()
        .map(|(i, c)| format!("[{}] {}", i + 1, c.chunk_text))
        .collect::<Vec<_>>()
        .join("\n\n");
    let max_keep_str = max_keep.to_string();
    let request = template.render(&[
        ("instruction", &instruction.text),
        ("chunks", &chunks),
        ("max_keep", &max_keep_str),
    ])?;
    let response = gateway.complete(&request)?;

    let mut order = Vec::new();
    for n in parse_indices(&response.text) {
        if (1..=contexts.len()).contains(&n) && !order.contains(&(n - 1)) {
            order.push(n - 1);
        }
        if order.len() == max_keep {
            break;
        }
    }
    if order.is_empty() {
        let warning = format!(
            "relevance response for {} had no usable chunk numbers; keeping top {} by rank",
            instruction.id, max_keep
        );
        tracing::warn!("{warning}");
        let order = top_by_rank(&contexts, max_keep);
        return Ok(split_selection(contexts, &order, Some(warning)));
    }
    Ok(split_selection(contexts, &order, None))
}

/// Full selection step: rule cleaning, short-chunk removal, then rank- or
/// model-based selection depending on `config.mode`.
pub fn filter_contexts(
    instruction: &Instruction,
    contexts: Vec<RetrievedContext>,
    config: &FilterConfig,
    gateway: Option<&Gateway>,
    template: &PromptTemplate,
) -> Result<Selection, FilterError> {
    let mut usable = Vec::new();
    let mut too_short = Vec::new();
    for ctx in contexts.into_iter().map(clean_context) {
        if ctx.chunk_text.chars().count() < config.min_chunk_chars {
            too_short.push(RetrievedContext {
                filter_status: FilterStatus::Dropped,
                ..ctx
            });
        } else {
            usable.push(ctx);
        }
    }
    let mut selection = match (config.mode, gateway) {
        (FilterMode::RulesThenLlm, Some(gw)) => llm_rank_chunks(instruction, usable, gw, template, config.max_keep)?,
        _ => select_by_rank(usable, config.max_keep),
    };
    selection.dropped.extend(too_short);
    selection.dropped.sort_by_key(|c| c.rank);
    Ok(selection)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledContext {
    pub text: String,
    pub used_ids: Vec<String>,
    /// Whitespace tokens of the included chunk texts (headers excluded).
    pub tokens: usize,
}

impl AssembledContext {
    pub fn is_empty(&self) -> bool {
        self.used_ids.is_empty()
    }
}

/// Concatenates kept chunks in order while their cumulative token count
/// stays within `budget_tokens`, stopping at the first chunk that would
/// overflow. Each chunk is preceded by a `[source: <locator>]` line.
pub fn assemble_context(kept: &[RetrievedContext], budget_tokens: usize) -> AssembledContext {
    let mut blocks = Vec::new();
    let mut used_ids = Vec::new();
    let mut tokens = 0usize;
    for ctx in kept {
        let n = token_count(&ctx.chunk_text);
        if tokens + n > budget_tokens {
            break;
        }
        tokens += n;
        blocks.push(format!("[source: {}]\n{}", ctx.source.locator, ctx.chunk_text));
        used_ids.push(ctx.id.clone());
    }
    AssembledContext {
        text: blocks.join("\n\n"),
        used_ids,
        tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockScript, ProviderConfig};
    use crate::model::{SourceKind, SourceRef};
    use crate::prompts::{TemplateSet, RANK};

    #[test]
    fn strips_tags_and_scripts() {
        assert_eq!(rule_filter("<p>Hello <b>world</b></p>"), "Hello world");
        assert_eq!(rule_filter("<script>x=1</script>Visible"), "Visible");
        assert_eq!(rule_filter("<p>a</p><p>b</p>"), "a b");
        assert_eq!(rule_filter("a <!-- hidden --> b"), "a b");
        assert_eq!(
            rule_filter("<nav><a href='/'>Home</a></nav>Body <footer>(c)</footer>"),
            "Body"
        );
        assert_eq!(rule_filter("<STYLE>p{}</STYLE>Text"), "Text");
    }

    #[test]
    fn decodes_entities_once() {
        assert_eq!(rule_filter("&amp;amp;"), "&amp;");
        assert_eq!(rule_filter("Fish &amp; chips&nbsp;&#33;"), "Fish & chips !");
        let escaped = rule_filter("&lt;b&gt;bold&lt;/b&gt;");
        assert!(is_tag_free(&escaped), "{escaped}");
    }

    #[test]
    fn tolerates_malformed_markup() {
        assert_eq!(rule_filter("<div class=\"x\" <p>text"), "class=\"x\" text");
        assert_eq!(rule_filter("before <script>never closed"), "before");
        assert_eq!(rule_filter("1 < 2 and 3 > 2"), "1 < 2 and 3 > 2");
        assert!(is_tag_free(&rule_filter("<<b>>x<i")));
    }

    fn ctx(rank: u32, text: &str) -> RetrievedContext {
        RetrievedContext::new(
            "ins",
            text.to_string(),
            SourceRef {
                kind: SourceKind::LocalCorpus,
                locator: format!("doc{rank}"),
            },
            10.0 - rank as f64,
            rank,
        )
    }

    #[test]
    fn cleaning_is_statused() {
        let c = clean_context(ctx(1, "&amp;amp;"));
        assert_eq!(c.chunk_text, "&amp;");
        assert_eq!(c.filter_status, FilterStatus::RuleCleaned);
        let again = clean_context(c.clone());
        assert_eq!(again, c);
    }

    fn rank_gateway(reply: &str) -> Gateway {
        let mut script = MockScript::default();
        script.rules.insert(RANK.into(), reply.into());
        Gateway::new(ProviderConfig::mock().with_script(script)).unwrap()
    }

    fn three() -> Vec<RetrievedContext> {
        vec![ctx(1, "one one"), ctx(2, "two two"), ctx(3, "three three")]
            .into_iter()
            .map(clean_context)
            .collect()
    }

    #[test]
    fn llm_ranking_parses_and_falls_back() {
        let templates = TemplateSet::builtin();
        let t = templates.get(RANK).unwrap();
        let ins = Instruction::from_text("question", 1).unwrap();

        let sel = llm_rank_chunks(&ins, three(), &rank_gateway("2, 1"), t, 2).unwrap();
        assert_eq!(sel.kept.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![2, 1]);
        assert!(sel.kept.iter().all(|c| c.filter_status == FilterStatus::Kept));
        assert_eq!(sel.dropped.len(), 1);
        assert!(sel.warning.is_none());

        let sel = llm_rank_chunks(&ins, three(), &rank_gateway("garbage"), t, 2).unwrap();
        assert_eq!(sel.kept.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![1, 2]);
        assert!(sel.warning.is_some());

        let sel = llm_rank_chunks(&ins, three(), &rank_gateway("5"), t, 2).unwrap();
        assert_eq!(sel.kept.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![1, 2]);
        assert!(sel.warning.is_some());

        let sel = llm_rank_chunks(&ins, three(), &rank_gateway("5, 3, 3"), t, 2).unwrap();
        assert_eq!(sel.kept.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![3]);
    }

    fn chunk_of(tokens: usize, rank: u32) -> RetrievedContext {
        let text = vec!["w"; tokens].join(" ");
        let mut c = ctx(rank, &text);
        c.filter_status = FilterStatus::Kept;
        c
    }

    #[test]
    fn assembly_respects_budget() {
        let kept = vec![chunk_of(50, 1), chunk_of(50, 2)];
        assert_eq!(assemble_context(&kept, 120).used_ids.len(), 2);
        let one = assemble_context(&kept, 60);
        assert_eq!(one.used_ids, vec![kept[0].id.clone()]);
        assert!(one.text.starts_with("[source: doc1]\n"));
        let none = assemble_context(&kept, 10);
        assert!(none.is_empty());
        assert_eq!(none.text, "");
    }

    #[test]
    fn rules_only_mode_drops_short_chunks() {
        let config = FilterConfig {
            mode: FilterMode::RulesOnly,
            max_keep: 1,
            context_token_budget: 100,
            min_chunk_chars: 5,
        };
        let ins = Instruction::from_text("q", 1).unwrap();
        let contexts = vec![
            ctx(1, "<b>ab</b>"),
            ctx(2, "long enough text"),
            ctx(3, "also long enough"),
        ];
        let templates = TemplateSet::builtin();
        let sel = filter_contexts(&ins, contexts, &config, None, templates.get(RANK).unwrap()).unwrap();
        assert_eq!(sel.kept.len(), 1);
        assert_eq!(sel.kept[0].rank, 2);
        assert_eq!(sel.dropped.len(), 2);
    }
}
