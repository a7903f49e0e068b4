//! Service-day clock times.
//!
//! Schedule times are seconds past midnight of the service day and may run
//! past 24:00 for after-midnight service.

use std::sync::OnceLock;

use regex::Regex;

/// Seconds past midnight of a service day.
pub type ServiceSeconds = u32;

/// Parses a GTFS `HH:MM:SS` time. Hours may exceed 23.
pub fn parse_gtfs_time(raw: &str) -> Option<ServiceSeconds> {
    let mut parts = raw.trim().split(':');
    let h: u32 = parts.next()?.trim().parse().ok()?;
    let m: u32 = parts.next()?.parse().ok()?;
    let s: u32 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || m > 59 || s > 59 || h > 47 {
        return None;
    }
    Some(h * 3600 + m * 60 + s)
}

/// Formats as `HH:MM`, dropping seconds.
pub fn format_hhmm(t: ServiceSeconds) -> String {
    format!("{:02}:{:02}", t / 3600, (t / 60) % 60)
}

/// Words that resolve to a fixed clock time.
pub const NAMED_TIMES: &[(&str, ServiceSeconds)] = &[
    ("morning", 8 * 3600),
    ("noon", 12 * 3600),
    ("midday", 12 * 3600),
    ("evening", 18 * 3600),
];

fn clock_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(\d{1,2})(?::(\d{2}))?\s*(a\.?m\.?|p\.?m\.?)?$").expect("valid regex")
    })
}

/// Resolves a time expression as produced by an extraction call.
///
/// Accepts `HH:MM`, `H:MM`, `8am`, `8:30 pm`, a bare hour and the words in
/// [`NAMED_TIMES`]. Leading "at", "around", "after" and "by" are skipped and
/// the word "tomorrow" is ignored. Anything else is `None` so the caller can
/// ask the rider instead of guessing.
pub fn parse_time_expr(raw: &str) -> Option<ServiceSeconds> {
    let lowered = raw.trim().to_lowercase();
    let mut words: Vec<&str> = lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "tomorrow" | "today" | "the" | "in"))
        .collect();
    while let Some(first) = words.first() {
        if matches!(*first, "at" | "around" | "after" | "by" | "about") {
            words.remove(0);
        } else {
            break;
        }
    }
    let text = words.join(" ");
    if text.is_empty() {
        return None;
    }
    if let Some(&(_, t)) = NAMED_TIMES.iter().find(|(w, _)| *w == text) {
        return Some(t);
    }
    let caps = clock_re().captures(&text)?;
    let mut hour: u32 = caps[1].parse().ok()?;
    let minute: u32 = caps.get(2).map_or(Ok(0), |m| m.as_str().parse()).ok()?;
    if minute > 59 {
        return None;
    }
    if let Some(meridiem) = caps.get(3) {
        if hour == 0 || hour > 12 {
            return None;
        }
        let pm = meridiem.as_str().starts_with('p');
        hour = match (hour, pm) {
            (12, false) => 0,
            (12, true) => 12,
            (h, true) => h + 12,
            (h, false) => h,
        };
    } else if hour > 23 {
        return None;
    }
    Some(hour * 3600 + minute * 60)
}

fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(?:(at|around|after|by|about|before)\s+)?(\d{1,2})(?::(\d{2}))?(?:\s*(a\.?m\b\.?|p\.?m\b\.?))?",
        )
        .expect("valid regex")
    })
}

/// Every clock time mentioned in free text, in order of appearance.
///
/// Bare numbers only count after a preposition ("at 8"), so that "platform 4"
/// is not read as a time.
pub fn time_mentions(text: &str) -> Vec<ServiceSeconds> {
    let mut out = Vec::new();
    for caps in mention_re().captures_iter(text) {
        let whole = caps.get(0).expect("match");
        if text[whole.end()..].starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        let minutes = caps.get(3).map(|m| m.as_str());
        let meridiem = caps.get(4).map(|m| m.as_str());
        if caps.get(1).is_none() && minutes.is_none() && meridiem.is_none() {
            continue;
        }
        let expr = format!(
            "{}{}{}",
            &caps[2],
            minutes.map(|m| format!(":{m}")).unwrap_or_default(),
            meridiem.map(|m| format!(" {m}")).unwrap_or_default()
        );
        if let Some(t) = parse_time_expr(&expr) {
            out.push(t);
        }
    }
    let lowered = text.to_lowercase();
    for (word, t) in NAMED_TIMES {
        if crate::textmatch::contains_word(&lowered, word) {
            out.push(*t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gtfs_times() {
        assert_eq!(parse_gtfs_time("07:00:00"), Some(25_200));
        assert_eq!(parse_gtfs_time("7:12:00"), Some(25_920));
        assert_eq!(parse_gtfs_time("25:10:00"), Some(90_600));
        assert_eq!(parse_gtfs_time("07:60:00"), None);
        assert_eq!(parse_gtfs_time("07:00"), None);
        assert_eq!(parse_gtfs_time("x"), None);
    }

    #[test]
    fn formats_past_midnight() {
        assert_eq!(format_hhmm(25_200), "07:00");
        assert_eq!(format_hhmm(90_600), "25:10");
    }

    #[test]
    fn time_expressions() {
        assert_eq!(parse_time_expr("08:00"), Some(8 * 3600));
        assert_eq!(parse_time_expr("8"), Some(8 * 3600));
        assert_eq!(parse_time_expr("8am"), Some(8 * 3600));
        assert_eq!(parse_time_expr("8:30 PM"), Some(20 * 3600 + 1800));
        assert_eq!(parse_time_expr("12 am"), Some(0));
        assert_eq!(parse_time_expr("12pm"), Some(12 * 3600));
        assert_eq!(parse_time_expr("tomorrow morning"), Some(8 * 3600));
        assert_eq!(parse_time_expr("around 8am"), Some(8 * 3600));
        assert_eq!(parse_time_expr("evening"), Some(18 * 3600));
        assert_eq!(parse_time_expr("sometime later"), None);
        assert_eq!(parse_time_expr("13pm"), None);
        assert_eq!(parse_time_expr(""), None);
    }

    #[test]
    fn mentions_in_text() {
        assert_eq!(
            time_mentions("from Union to Oshawa at 8"),
            vec![8 * 3600]
        );
        assert_eq!(
            time_mentions("leaving 7:30am, back by 6 pm"),
            vec![7 * 3600 + 1800, 18 * 3600]
        );
        assert_eq!(time_mentions("tomorrow morning please"), vec![8 * 3600]);
        assert!(time_mentions("platform 4").is_empty());
    }
}
