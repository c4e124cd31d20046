//! Parsing and rendering of the declarative coupling configuration format.
//!
//! The format is line oriented, one directive per line:
//!
//! ```text
//! instance <name> <kind>:<impl-id>        kind: submodel|mapper|source|sink
//! scale <name> dt=<duration> T=<duration>
//! param <name>.<key> <value to end of line>
//! conduit <name>.<port> -> <name>.<port> [<filter>,<filter>,...]
//! ```
//!
//! Durations are `<decimal> <unit>` with units s/second, ms, minute, hour
//! and day. Comments run from `#` to end of line; blank lines are ignored;
//! tokens are separated by spaces or tabs. Newlines may be LF or CRLF.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::topology::{
    validate_topology, ConduitSpec, Endpoint, FilterSpec, InstanceKind, InstanceSpec, ScaleSpec,
    Topology, Violation,
};

/// A parsed configuration: the topology plus the parameter directives in
/// their original order (used to re-render the document faithfully).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigDocument {
    pub topology: Topology,
    /// (instance, key, value) triples as they appeared in the source.
    pub raw_params: Vec<(String, String, String)>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}, col {col}: expected {expected}")]
    Syntax {
        line: usize,
        col: usize,
        expected: String,
    },
    #[error("line {line}: duplicate instance {name}")]
    DuplicateInstance { line: usize, name: String },
    #[error("line {line}: unknown instance {name}")]
    UnknownInstance { line: usize, name: String },
    #[error("line {line}: bad duration {text:?}")]
    BadDuration { line: usize, text: String },
    #[error("line {line}: bad filter {name}: {reason}")]
    BadFilter {
        line: usize,
        name: String,
        reason: String,
    },
    #[error("configuration produces an invalid topology: {0:?}")]
    InvalidTopology(Vec<Violation>),
}

/// Seconds per unit of duration.
const DURATION_UNITS: &[(&str, f64)] = &[
    ("s", 1.0),
    ("second", 1.0),
    ("ms", 0.001),
    ("minute", 60.0),
    ("hour", 3600.0),
    ("day", 86400.0),
];

fn unit_seconds(unit: &str) -> Option<f64> {
    DURATION_UNITS
        .iter()
        .find(|(name, _)| *name == unit)
        .map(|(_, secs)| *secs)
}

#[derive(Debug)]
enum Directive {
    Instance {
        name: String,
        kind: InstanceKind,
        impl_id: String,
    },
    Scale {
        name: String,
        scale: ScaleSpec,
    },
    Param {
        name: String,
        key: String,
        value: String,
    },
    Conduit(ConduitSpec),
}

/// A token with its 1-based starting column.
struct Tok<'a> {
    col: usize,
    text: &'a str,
}

fn tokenize(line: &str) -> Vec<Tok<'_>> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c == ' ' || c == '\t' {
            if let Some(s) = start.take() {
                tokens.push(Tok {
                    col: s + 1,
                    text: &line[s..i],
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        tokens.push(Tok {
            col: s + 1,
            text: &line[s..],
        });
    }
    tokens
}

/// Parses a configuration document. The returned document's topology is
/// guaranteed to pass [`validate_topology`].
pub fn parse_config(text: &str) -> Result<ConfigDocument, ConfigError> {
    let mut directives: Vec<(usize, Directive)> = Vec::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let line = line.trim_end_matches('\r');
        let tokens = tokenize(line);
        if tokens.is_empty() {
            continue;
        }
        let directive = parse_directive(line_no, line, &tokens)?;
        directives.push((line_no, directive));
    }

    assemble(directives)
}

fn syntax(line: usize, col: usize, expected: impl Into<String>) -> ConfigError {
    ConfigError::Syntax {
        line,
        col,
        expected: expected.into(),
    }
}

fn parse_directive(
    line_no: usize,
    line: &str,
    tokens: &[Tok<'_>],
) -> Result<Directive, ConfigError> {
    match tokens[0].text {
        "instance" => {
            let name = expect_token(line_no, tokens, 1, "instance name")?;
            let spec = tokens
                .get(2)
                .ok_or_else(|| syntax(line_no, line.len() + 1, "<kind>:<impl-id>"))?;
            let (kind_str, impl_id) = spec
                .text
                .split_once(':')
                .ok_or_else(|| syntax(line_no, spec.col, "<kind>:<impl-id>"))?;
            let kind = InstanceKind::parse(kind_str).ok_or_else(|| {
                syntax(
                    line_no,
                    spec.col,
                    "instance kind (submodel|mapper|source|sink)",
                )
            })?;
            expect_end(line_no, tokens, 3)?;
            Ok(Directive::Instance {
                name: name.to_string(),
                kind,
                impl_id: impl_id.to_string(),
            })
        }
        "scale" => {
            let name = expect_token(line_no, tokens, 1, "instance name")?;
            let (dt, next) = parse_duration_field(line_no, line, tokens, 2, "dt")?;
            let (total, next) = parse_duration_field(line_no, line, tokens, next, "T")?;
            expect_end(line_no, tokens, next)?;
            Ok(Directive::Scale {
                name: name.to_string(),
                scale: ScaleSpec::new(dt, total),
            })
        }
        "param" => {
            let target = tokens
                .get(1)
                .ok_or_else(|| syntax(line_no, line.len() + 1, "<instance>.<key>"))?;
            let (name, key) = target
                .text
                .split_once('.')
                .ok_or_else(|| syntax(line_no, target.col, "<instance>.<key>"))?;
            if name.is_empty() || key.is_empty() {
                return Err(syntax(line_no, target.col, "<instance>.<key>"));
            }
            // The value is everything after the target token, trimmed.
            let value_start = target.col - 1 + target.text.len();
            let value = line[value_start..].trim().to_string();
            Ok(Directive::Param {
                name: name.to_string(),
                key: key.to_string(),
                value,
            })
        }
        "conduit" => {
            let from = parse_endpoint(line_no, tokens, 1)?;
            let arrow = tokens
                .get(2)
                .ok_or_else(|| syntax(line_no, line.len() + 1, "'->'"))?;
            if arrow.text != "->" {
                return Err(syntax(line_no, arrow.col, "'->'"));
            }
            let to = parse_endpoint(line_no, tokens, 3)?;
            let filters = if tokens.len() > 4 {
                parse_filter_list(line_no, tokens)?
            } else {
                Vec::new()
            };
            Ok(Directive::Conduit(ConduitSpec {
                from,
                to,
                filters,
            }))
        }
        other => Err(syntax(
            line_no,
            tokens[0].col,
            format!("directive (instance|scale|param|conduit), got {other:?}"),
        )),
    }
}

fn expect_token<'a>(
    line_no: usize,
    tokens: &'a [Tok<'_>],
    index: usize,
    what: &str,
) -> Result<&'a str, ConfigError> {
    match tokens.get(index) {
        Some(tok) => Ok(tok.text),
        None => Err(syntax(line_no, 1, format!("{what} (missing token)"))),
    }
}

fn expect_end(line_no: usize, tokens: &[Tok<'_>], from: usize) -> Result<(), ConfigError> {
    match tokens.get(from) {
        Some(tok) => Err(syntax(line_no, tok.col, "end of line")),
        None => Ok(()),
    }
}

/// Parses `<field>=<decimal> <unit>` starting at token `index`.
/// Returns the value in seconds and the index of the next token.
fn parse_duration_field(
    line_no: usize,
    line: &str,
    tokens: &[Tok<'_>],
    index: usize,
    field: &str,
) -> Result<(f64, usize), ConfigError> {
    let tok = tokens
        .get(index)
        .ok_or_else(|| syntax(line_no, line.len() + 1, format!("{field}=<duration>")))?;
    let prefix = format!("{field}=");
    let number = tok
        .text
        .strip_prefix(prefix.as_str())
        .ok_or_else(|| syntax(line_no, tok.col, format!("{field}=<duration>")))?;
    let unit_tok = tokens
        .get(index + 1)
        .ok_or_else(|| ConfigError::BadDuration {
            line: line_no,
            text: number.to_string(),
        })?;
    let text = format!("{number} {}", unit_tok.text);
    let value: f64 = number.parse().map_err(|_| ConfigError::BadDuration {
        line: line_no,
        text: text.clone(),
    })?;
    let unit = unit_seconds(unit_tok.text).ok_or_else(|| ConfigError::BadDuration {
        line: line_no,
        text: text.clone(),
    })?;
    Ok((value * unit, index + 2))
}

fn parse_endpoint(line_no: usize, tokens: &[Tok<'_>], index: usize) -> Result<Endpoint, ConfigError> {
    let tok = tokens
        .get(index)
        .ok_or_else(|| syntax(line_no, 1, "<instance>.<port>"))?;
    let (instance, port) = tok
        .text
        .split_once('.')
        .ok_or_else(|| syntax(line_no, tok.col, "<instance>.<port>"))?;
    if instance.is_empty() || port.is_empty() || port.contains('.') {
        return Err(syntax(line_no, tok.col, "<instance>.<port>"));
    }
    Ok(Endpoint::new(instance, port))
}

/// Parses the trailing `[filter,filter,...]` list of a conduit line.
/// Whitespace inside the list is tolerated on input, never emitted.
fn parse_filter_list(line_no: usize, tokens: &[Tok<'_>]) -> Result<Vec<FilterSpec>, ConfigError> {
    let col = tokens[4].col;
    let joined: String = tokens[4..]
        .iter()
        .map(|t| t.text)
        .collect::<Vec<_>>()
        .join("");
    let inner = joined
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| syntax(line_no, col, "filter list in [brackets]"))?;
    let mut filters = Vec::new();
    for piece in split_top_level(inner) {
        if piece.is_empty() {
            return Err(syntax(line_no, col, "filter name"));
        }
        filters.push(parse_filter(line_no, piece)?);
    }
    Ok(filters)
}

/// Splits on commas that are not inside parentheses.
fn split_top_level(s: &str) -> Vec<&str> {
    if s.is_empty() {
        return Vec::new();
    }
    let mut pieces = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                pieces.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    pieces.push(&s[start..]);
    pieces
}

fn parse_filter(line_no: usize, text: &str) -> Result<FilterSpec, ConfigError> {
    match text {
        "compress" => return Ok(FilterSpec::Compress),
        "decompress" => return Ok(FilterSpec::Decompress),
        _ => {}
    }
    if let Some(args) = text.strip_prefix("affine(").and_then(|s| s.strip_suffix(')')) {
        let parts: Vec<&str> = args.split(',').collect();
        if parts.len() != 2 {
            return Err(ConfigError::BadFilter {
                line: line_no,
                name: "affine".into(),
                reason: format!("takes exactly 2 arguments, got {}", parts.len()),
            });
        }
        let scale: f64 = parts[0].parse().map_err(|_| ConfigError::BadFilter {
            line: line_no,
            name: "affine".into(),
            reason: format!("bad argument {:?}", parts[0]),
        })?;
        let offset: f64 = parts[1].parse().map_err(|_| ConfigError::BadFilter {
            line: line_no,
            name: "affine".into(),
            reason: format!("bad argument {:?}", parts[1]),
        })?;
        return Ok(FilterSpec::Affine { scale, offset });
    }
    // compress/decompress take no arguments; anything else is unknown.
    let name = text.split('(').next().unwrap_or(text);
    let reason = if name == "compress" || name == "decompress" {
        "takes no arguments".to_string()
    } else {
        "unknown filter".to_string()
    };
    Err(ConfigError::BadFilter {
        line: line_no,
        name: name.to_string(),
        reason,
    })
}

fn assemble(directives: Vec<(usize, Directive)>) -> Result<ConfigDocument, ConfigError> {
    let mut topology = Topology::default();
    let mut raw_params = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();

    for (line, directive) in &directives {
        if let Directive::Instance {
            name,
            kind,
            impl_id,
        } = directive
        {
            if index.contains_key(name) {
                return Err(ConfigError::DuplicateInstance {
                    line: *line,
                    name: name.clone(),
                });
            }
            index.insert(name.clone(), topology.instances.len());
            topology
                .instances
                .push(InstanceSpec::new(name.clone(), *kind, impl_id.clone()));
        }
    }

    for (line, directive) in directives {
        match directive {
            Directive::Instance { .. } => {}
            Directive::Scale { name, scale } => {
                let idx = *index.get(&name).ok_or(ConfigError::UnknownInstance {
                    line,
                    name: name.clone(),
                })?;
                topology.instances[idx].scale = Some(scale);
            }
            Directive::Param { name, key, value } => {
                let idx = *index.get(&name).ok_or(ConfigError::UnknownInstance {
                    line,
                    name: name.clone(),
                })?;
                topology.instances[idx]
                    .params
                    .insert(key.clone(), value.clone());
                raw_params.push((name, key, value));
            }
            Directive::Conduit(conduit) => {
                for endpoint in [&conduit.from, &conduit.to] {
                    if !index.contains_key(&endpoint.instance) {
                        return Err(ConfigError::UnknownInstance {
                            line,
                            name: endpoint.instance.clone(),
                        });
                    }
                }
                topology.conduits.push(conduit);
            }
        }
    }

    let violations = validate_topology(&topology);
    if !violations.is_empty() {
        return Err(ConfigError::InvalidTopology(violations));
    }

    Ok(ConfigDocument {
        topology,
        raw_params,
    })
}

/// Renders a document in canonical form: instances, then scales, then
/// params, then conduits, in declaration order, with durations in seconds.
///
/// `parse_config(render_config(d))` equals `d` up to duration normalization.
pub fn render_config(doc: &ConfigDocument) -> String {
    let mut out = String::new();
    for inst in &doc.topology.instances {
        let _ = writeln!(out, "instance {} {}:{}", inst.name, inst.kind, inst.impl_id);
    }
    for inst in &doc.topology.instances {
        if let Some(scale) = &inst.scale {
            let _ = writeln!(
                out,
                "scale {} dt={} s T={} s",
                inst.name, scale.dt, scale.total_time
            );
        }
    }
    for (name, key, value) in &doc.raw_params {
        if value.is_empty() {
            let _ = writeln!(out, "param {name}.{key}");
        } else {
            let _ = writeln!(out, "param {name}.{key} {value}");
        }
    }
    for conduit in &doc.topology.conduits {
        let filters = if conduit.filters.is_empty() {
            String::new()
        } else {
            let list: Vec<String> = conduit.filters.iter().map(|f| f.to_string()).collect();
            format!(" [{}]", list.join(","))
        };
        let _ = writeln!(out, "conduit {} -> {}{}", conduit.from, conduit.to, filters);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MACRO_MICRO: &str = "\
instance macro submodel:demo.macro
instance micro submodel:demo.micro
scale macro dt=1 hour T=1 day
scale micro dt=1 s T=1 hour
conduit macro.macroscopicVariable -> micro.environmentValue
";

    #[test]
    fn parses_macro_micro() {
        let doc = parse_config(MACRO_MICRO).unwrap();
        assert_eq!(doc.topology.instances.len(), 2);
        assert_eq!(doc.topology.conduits.len(), 1);
        let macro_inst = doc.topology.instance("macro").unwrap();
        assert_eq!(macro_inst.scale, Some(ScaleSpec::new(3600.0, 86400.0)));
        let micro_inst = doc.topology.instance("micro").unwrap();
        assert_eq!(micro_inst.scale, Some(ScaleSpec::new(1.0, 3600.0)));
    }

    #[test]
    fn empty_input_gives_empty_document() {
        let doc = parse_config("").unwrap();
        assert_eq!(doc, ConfigDocument::default());
        assert_eq!(render_config(&doc), "");
    }

    #[test]
    fn unknown_instance_in_conduit() {
        let err = parse_config("conduit a.x -> b.y").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownInstance {
                line: 1,
                name: "a".into()
            }
        );
    }

    #[test]
    fn duplicate_instance_reported_with_line() {
        let err = parse_config("instance a mapper:x\ninstance a mapper:x").unwrap_err();
        assert_eq!(
            err,
            ConfigError::DuplicateInstance {
                line: 2,
                name: "a".into()
            }
        );
    }

    #[test]
    fn bad_duration() {
        let err = parse_config("instance a submodel:x\nscale a dt=abc hour T=1 day").unwrap_err();
        assert!(matches!(err, ConfigError::BadDuration { line: 2, .. }));
        let err = parse_config("instance a submodel:x\nscale a dt=1 fortnight T=1 day").unwrap_err();
        assert!(matches!(err, ConfigError::BadDuration { line: 2, .. }));
    }

    #[test]
    fn bad_filter_arity() {
        let base = "instance a mapper:x\ninstance b mapper:x\n";
        let err =
            parse_config(&format!("{base}conduit a.o -> b.i [affine(1)]")).unwrap_err();
        assert!(matches!(err, ConfigError::BadFilter { line: 3, .. }));
        let err = parse_config(&format!("{base}conduit a.o -> b.i [squash]")).unwrap_err();
        assert!(matches!(
            err,
            ConfigError::BadFilter { line: 3, ref name, .. } if name == "squash"
        ));
    }

    #[test]
    fn filters_parse_and_render() {
        let base = "instance a mapper:x\ninstance b mapper:x\n";
        let text = format!("{base}conduit a.o -> b.i [compress,affine(2,1),decompress]");
        let doc = parse_config(&text).unwrap();
        assert_eq!(
            doc.topology.conduits[0].filters,
            vec![
                FilterSpec::Compress,
                FilterSpec::Affine {
                    scale: 2.0,
                    offset: 1.0
                },
                FilterSpec::Decompress,
            ]
        );
        let rendered = render_config(&doc);
        assert!(rendered.ends_with("conduit a.o -> b.i [compress,affine(2,1),decompress]\n"));
        // Spaces after commas are tolerated on input.
        let spaced = format!("{base}conduit a.o -> b.i [compress, affine(2,1)]");
        assert!(parse_config(&spaced).is_ok());
    }

    #[test]
    fn canonical_render_normalizes_durations() {
        let doc = parse_config(MACRO_MICRO).unwrap();
        let rendered = render_config(&doc);
        assert!(rendered.contains("scale macro dt=3600 s T=86400 s"));
        assert!(rendered.contains("scale micro dt=1 s T=3600 s"));
        let reparsed = parse_config(&rendered).unwrap();
        assert_eq!(reparsed, doc);
    }

    #[test]
    fn param_value_runs_to_end_of_line() {
        let text = "instance a mapper:x\nparam a.command /usr/bin/model --flag 1  # comment";
        let doc = parse_config(text).unwrap();
        assert_eq!(
            doc.raw_params,
            vec![(
                "a".to_string(),
                "command".to_string(),
                "/usr/bin/model --flag 1".to_string()
            )]
        );
        let reparsed = parse_config(&render_config(&doc)).unwrap();
        assert_eq!(reparsed, doc);
    }

    #[test]
    fn comments_blank_lines_and_crlf() {
        let text = "# header\r\n\r\ninstance a mapper:x\r\n  # indented comment\r\n";
        let doc = parse_config(text).unwrap();
        assert_eq!(doc.topology.instances.len(), 1);
    }

    #[test]
    fn invalid_topology_is_rejected() {
        // Submodel without a scale parses but fails validation.
        let err = parse_config("instance a submodel:x").unwrap_err();
        assert!(matches!(err, ConfigError::InvalidTopology(_)));
    }

    #[test]
    fn one_mebibyte_of_noise_parses_or_errors_without_panicking() {
        // Pseudo-random bytes, lossily decoded, at the documented input
        // size bound.
        let mut state = 0x243F6A8885A308D3u64;
        let bytes: Vec<u8> = (0..1024 * 1024)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 33) as u8
            })
            .collect();
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_config(&text);
    }

    #[test]
    fn syntax_error_carries_position() {
        let err = parse_config("instance a").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));
        let err = parse_config("bogus directive").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, col: 1, .. }));
        let err = parse_config("instance a mapper:x extra").unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Syntax { line: 1, col: 21, .. }
        ));
    }

    mod properties {
        use super::*;
        use crate::topology::InstanceKind;
        use proptest::prelude::*;

        fn arb_document() -> impl Strategy<Value = ConfigDocument> {
            let kinds = prop_oneof![
                Just(InstanceKind::Submodel),
                Just(InstanceKind::Mapper),
                Just(InstanceKind::Source),
                Just(InstanceKind::Sink),
            ];
            let insts = proptest::collection::vec(
                (kinds, 1u32..1000, 1u32..1000, prop::option::of("[a-z]{1,8}")),
                1..6,
            );
            let edges = proptest::collection::vec((0usize..6, 0usize..6), 0..6);
            let filters = proptest::collection::vec(
                prop_oneof![
                    Just(FilterSpec::Compress),
                    Just(FilterSpec::Decompress),
                    (-100i32..100, -100i32..100).prop_map(|(a, b)| FilterSpec::Affine {
                        scale: a as f64 / 4.0,
                        offset: b as f64 / 4.0,
                    }),
                ],
                0..3,
            );
            (insts, edges, filters).prop_map(|(insts, edges, filters)| {
                let n = insts.len();
                let mut topology = Topology::default();
                let mut raw_params = Vec::new();
                for (i, (kind, dt_q, steps, param)) in insts.into_iter().enumerate() {
                    let name = format!("inst{i}");
                    let mut spec = InstanceSpec::new(&name, kind, "impl.id");
                    let dt = dt_q as f64 / 16.0;
                    spec.scale = Some(ScaleSpec::new(dt, dt * steps as f64));
                    if let Some(value) = param {
                        spec.params.insert("key".into(), value.clone());
                        raw_params.push((name.clone(), "key".to_string(), value));
                    }
                    topology.instances.push(spec);
                }
                for (idx, (a, b)) in edges.into_iter().enumerate() {
                    let (a, b) = (a % n, b % n);
                    if a == b {
                        continue;
                    }
                    let from_kind = topology.instances[a].kind;
                    let to_kind = topology.instances[b].kind;
                    if from_kind == InstanceKind::Sink || to_kind == InstanceKind::Source {
                        continue;
                    }
                    topology.conduits.push(ConduitSpec {
                        from: Endpoint::new(format!("inst{a}"), format!("o{idx}")),
                        to: Endpoint::new(format!("inst{b}"), format!("i{idx}")),
                        filters: filters.clone(),
                    });
                }
                ConfigDocument {
                    topology,
                    raw_params,
                }
            })
        }

        proptest! {
            #[test]
            fn round_trip(doc in arb_document()) {
                prop_assume!(validate_topology(&doc.topology).is_empty());
                let rendered = render_config(&doc);
                let reparsed = parse_config(&rendered).unwrap();
                prop_assert_eq!(reparsed, doc);
            }

            #[test]
            fn never_panics_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..4096)) {
                let text = String::from_utf8_lossy(&bytes);
                let _ = parse_config(&text);
            }

            #[test]
            fn never_panics_on_arbitrary_text(text in "\\PC{0,2048}") {
                let _ = parse_config(&text);
            }
        }
    }
}
