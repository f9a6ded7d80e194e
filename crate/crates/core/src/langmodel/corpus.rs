//! Small synthetic corpora with enumerable sensitive categories.

pub const MONTHS: [&str; 12] = [
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];

/// Day tokens `d1` .. `d30`.
pub fn day_tokens() -> Vec<String> {
    (1..=30).map(|d| format!("d{d}")).collect()
}

/// Given names with deliberately uneven frequencies.
pub const NAMES: [(&str, usize); 16] = [
    ("lydia", 12),
    ("lillian", 12),
    ("loraine", 11),
    ("grace", 9),
    ("emma", 8),
    ("olivia", 8),
    ("ava", 6),
    ("mia", 5),
    ("nora", 4),
    ("ruth", 4),
    ("clara", 3),
    ("iris", 2),
    ("rose", 2),
    ("hazel", 1),
    ("ivy", 1),
    ("alma", 1),
];

pub const SYMPTOMS: [&str; 6] = ["pain", "fever", "cough", "nausea", "fatigue", "dizziness"];

/// A clinical-note style corpus. Every (month, day) pair occurs exactly once
/// after "seen on", so the date slot is a 360-member category with equal
/// counts. Names follow the counts in [`NAMES`].
pub fn clinical_corpus() -> String {
    let mut out = String::new();
    let days = day_tokens();
    for m in MONTHS {
        for d in &days {
            out.push_str(&format!("the patient was seen on {m} {d}\n"));
        }
    }
    for (i, (name, count)) in NAMES.iter().enumerate() {
        for c in 0..*count {
            let s = SYMPTOMS[(i + c) % SYMPTOMS.len()];
            out.push_str(&format!("the patient name is {name} and she reports {s}\n"));
        }
    }
    out
}

/// Tag rules for [`clinical_corpus`] in rule-file syntax.
pub fn clinical_tag_rules() -> String {
    let months = MONTHS.join("|");
    let names: Vec<&str> = NAMES.iter().map(|(n, _)| *n).collect();
    format!(
        "date\t/({months}) d([1-9]|[12][0-9]|30)/\nname\t/({})/\n",
        names.join("|")
    )
}

pub const CLINICAL_PROMPT: &str = "the patient name is lydia and she was seen on march d12";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langmodel::vocab::encode_lines;

    #[test]
    fn date_category_has_360_members() {
        let (vocab, seqs) = encode_lines(&clinical_corpus());
        let seen_on = [vocab.id("seen").unwrap(), vocab.id("on").unwrap()];
        let dated = seqs.iter().filter(|s| s.windows(2).any(|w| w == seen_on)).count();
        assert_eq!(dated, 360);
        assert!(vocab.encode(CLINICAL_PROMPT).is_ok());
    }
}
