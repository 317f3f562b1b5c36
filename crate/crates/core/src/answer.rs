/// Marker that precedes the final answer in every rationale.
pub const SENTINEL: &str = "=> ANSWER: ";

pub fn sentinel_line(answer: i64) -> String {
    format!("{SENTINEL}{answer}")
}

/// Value of the last answer sentinel in `text`.
///
/// Returns `None` when there is no sentinel or the last one is not followed
/// by an integer that ends at whitespace or end of text. Earlier sentinels are
/// never consulted.
pub fn extract_answer(text: &str) -> Option<i64> {
    let start = text.rfind(SENTINEL)? + SENTINEL.len();
    let rest = &text[start..];
    let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
    let number = &rest[..end];
    let digits = number.strip_prefix('-').unwrap_or(number);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    number.parse().ok()
}
