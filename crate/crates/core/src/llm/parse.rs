use super::LlmError;

/// A numeric literal found in text: byte span and value.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Literal {
    start: usize,
    end: usize,
    value: f64,
}

fn scan_literals(text: &str) -> Result<Vec<Literal>, LlmError> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let starts_number = b[i].is_ascii_digit()
            || (b[i] == b'.' && b.get(i + 1).is_some_and(u8::is_ascii_digit))
            || ((b[i] == b'-' || b[i] == b'+')
                && b.get(i + 1)
                    .is_some_and(|c| c.is_ascii_digit() || *c == b'.'));
        // a digit glued to a word ("45g", "x2") still counts; one inside an identifier does not
        let in_word = i > 0 && (b[i - 1].is_ascii_alphabetic() || b[i - 1] == b'_');
        if !starts_number || in_word {
            i += 1;
            continue;
        }
        let start = i;
        if b[i] == b'-' || b[i] == b'+' {
            i += 1;
        }
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i < b.len() && b[i] == b'.' && b.get(i + 1).is_some_and(u8::is_ascii_digit) {
            i += 1;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
            let mut j = i + 1;
            if j < b.len() && (b[j] == b'-' || b[j] == b'+') {
                j += 1;
            }
            if j < b.len() && b[j].is_ascii_digit() {
                while j < b.len() && b[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let lit = &text[start..i];
        let value: f64 = lit
            .parse()
            .map_err(|_| LlmError::Parse(format!("bad numeric literal `{lit}`")))?;
        if !value.is_finite() {
            return Err(LlmError::NonFinite(lit.to_string()));
        }
        out.push(Literal {
            start,
            end: i,
            value,
        });
    }
    Ok(out)
}

fn after_response_marker(text: &str) -> &str {
    match text.rfind("Response:") {
        Some(p) => &text[p + "Response:".len()..],
        None => text,
    }
}

/// Longest run of comma/space separated decimals after the last
/// `Response:` marker (or in the whole text when there is none). Ties go to
/// the earliest run.
pub fn parse_series_response(text: &str) -> Result<Vec<f64>, LlmError> {
    let body = after_response_marker(text);
    let lits = scan_literals(body)?;
    let mut best: &[Literal] = &[];
    let mut run_start = 0;
    for i in 0..=lits.len() {
        let breaks = i == lits.len()
            || (i > run_start && {
                let gap = &body[lits[i - 1].end..lits[i].start];
                !gap.chars().all(|c| c == ',' || c.is_whitespace())
            });
        if breaks {
            if i - run_start > best.len() {
                best = &lits[run_start..i];
            }
            run_start = i;
        }
    }
    if best.is_empty() {
        return Err(LlmError::NoNumbers);
    }
    Ok(best.iter().map(|l| l.value).collect())
}

/// Value of a `name = value` assignment.
pub fn parse_field(text: &str, name: &str) -> Result<f64, LlmError> {
    let missing = || LlmError::MissingField(name.to_string());
    let mut rest = text;
    while let Some(p) = rest.find(name) {
        let after = rest[p + name.len()..].trim_start();
        if let Some(v) = after.strip_prefix('=') {
            let lits = scan_literals(v)?;
            let first = lits.first().ok_or_else(missing)?;
            if !v[..first.start].trim().is_empty() {
                return Err(missing());
            }
            return Ok(first.value);
        }
        rest = &rest[p + name.len()..];
    }
    Err(missing())
}

/// Bolus from a chat answer: the number after "take" (as in "You should
/// take 7 U bolus"), otherwise the last number before a unit marker.
pub fn parse_dose_response(text: &str) -> Result<f64, LlmError> {
    let body = after_response_marker(text);
    let lower = body.to_ascii_lowercase();
    let lits = scan_literals(body)?;
    let take = lower.match_indices("take").map(|(p, _)| p).find(|&p| {
        let before = lower[..p].chars().next_back();
        let after = lower[p + 4..].chars().next();
        !before.is_some_and(char::is_alphabetic) && !after.is_some_and(char::is_alphabetic)
    });
    if let Some(p) = take {
        if let Some(l) = lits.iter().find(|l| l.start > p) {
            let between = &lower[p + 4..l.start];
            if between.split_whitespace().count() <= 2 {
                return check_dose(l.value);
            }
        }
    }
    let unit = lits.iter().rev().find(|l| {
        let tail = lower[l.end..].trim_start();
        tail.starts_with("u ") || tail == "u" || tail.starts_with("u.") || tail.starts_with("unit")
    });
    match unit {
        Some(l) => check_dose(l.value),
        None => Err(LlmError::NoNumbers),
    }
}

fn check_dose(v: f64) -> Result<f64, LlmError> {
    if v < 0.0 {
        return Err(LlmError::Parse(format!("negative dose {v}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn series_response_forms() {
        assert_eq!(
            parse_series_response("Your timeseries is 1.0, 0.9995").unwrap(),
            vec![1.0, 0.9995]
        );
        assert_eq!(
            parse_series_response("### Response: 0.015").unwrap(),
            vec![0.015]
        );
        assert!(matches!(
            parse_series_response("no numbers here"),
            Err(LlmError::NoNumbers)
        ));
        assert_eq!(
            parse_series_response(
                "### Input: 9 9 9\n### Response: Your timeseries is 1.0, 0.5 0.25 ..."
            )
            .unwrap(),
            vec![1.0, 0.5, 0.25]
        );
        assert_eq!(
            parse_series_response("a 1 2 b 3 4 5 c 6").unwrap(),
            vec![3.0, 4.0, 5.0]
        );
        assert_eq!(
            parse_series_response("values: 1e-3, 2.5E2.").unwrap(),
            vec![0.001, 250.0]
        );
    }

    #[test]
    fn non_finite_literal_is_an_error() {
        assert!(matches!(
            parse_series_response("1.0, 1e999"),
            Err(LlmError::NonFinite(_))
        ));
    }

    #[test]
    fn field_lookup() {
        assert_eq!(
            parse_field(
                "### Input:\ndiffusion_parameter = 0.025\n",
                "diffusion_parameter"
            )
            .unwrap(),
            0.025
        );
        assert!(
            matches!(parse_field("### Input: 1.0 0.9", "diffusion_parameter"), Err(LlmError::MissingField(f)) if f == "diffusion_parameter")
        );
        assert!(parse_field("diffusion_parameter = unknown", "diffusion_parameter").is_err());
    }

    #[test]
    fn dose_answers() {
        assert_eq!(
            parse_dose_response("Answer: You should take 3 U bolus").unwrap(),
            3.0
        );
        let faulty = "Carb intake: 45g Carb ratio: 5 Insulin on board: 2 U\nBolus dose=(45/5)+2=9+2=11 U\nTherefore, based on the provided information, you should take 11 units of bolus insulin for a 45g carb intake with a carb ratio of 5 and 2 units of insulin on board.";
        assert_eq!(parse_dose_response(faulty).unwrap(), 11.0);
        assert_eq!(parse_dose_response("Bolus dose = 7 U").unwrap(), 7.0);
        assert!(parse_dose_response("I cannot help with that").is_err());
    }

    proptest! {
        #[test]
        fn rendered_series_parse_back(v in proptest::collection::vec(0.0f64..2.0, 1..60)) {
            let text = crate::llm::format_series(&v, 5, " ");
            let back = parse_series_response(&text).unwrap();
            prop_assert_eq!(back.len(), v.len());
            for (a, b) in back.iter().zip(&v) {
                prop_assert!((a - b).abs() <= 5e-5 * b.abs().max(1e-300) + 1e-300);
            }
        }
    }
}
