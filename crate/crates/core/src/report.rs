//! Report emitters. Reports are views over the stage artifacts: every
//! percentage is recomputable from the underlying counts, which travel with
//! each row. Text tables round to one decimal; JSON keeps full precision.

use serde::{Deserialize, Serialize};

use crate::pipeline::{BucketCounts, Category, Condition, OpenBookOutcome};
use crate::stats::ParametricBiasSummary;

/// "12,836" style thousands grouping for count columns.
pub fn format_count(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn pct(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        100.0 * numerator as f64 / denominator as f64
    }
}

/// One decimal, paper convention.
fn fmt1(x: f64) -> String {
    format!("{x:.1}")
}

/// Signed delta in parentheses; exact zeros print unsigned.
fn fmt_delta(x: f64) -> String {
    let rounded = (x * 10.0).round() / 10.0;
    if rounded == 0.0 {
        "(0.0)".to_string()
    } else {
        format!("({rounded:+.1})")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let fields: Vec<String> = row.iter().map(|f| csv_field(f)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Left-aligned first column, right-aligned rest, two-space gutters.
fn render_aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut push_row = |cells: &[String]| {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let pad = widths[i].saturating_sub(cell.chars().count());
            if i == 0 {
                line.push_str(cell);
                line.push_str(&" ".repeat(pad));
            } else {
                line.push_str(&" ".repeat(pad));
                line.push_str(cell);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    };
    push_row(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    for row in rows {
        push_row(row);
    }
    out
}

/// Filter funnel row: dataset sizes through Stage 2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReportRow {
    pub dataset: String,
    pub counts: BucketCounts,
    pub skipped_parse: usize,
    pub generation_failures: usize,
}

impl FilterReportRow {
    pub fn conflict_percent(&self) -> f64 {
        pct(self.counts.knowledge_conflict, self.counts.full)
    }
}

pub fn filter_report_text(rows: &[FilterReportRow]) -> String {
    let header = [
        "Dataset",
        "Full",
        "Closed-book correct",
        "Closed-book wrong",
        "Knowledge conflict",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                format_count(r.counts.full),
                format_count(r.counts.closed_book_correct),
                format_count(r.counts.closed_book_wrong),
                format!(
                    "{} ({}%)",
                    format_count(r.counts.knowledge_conflict),
                    r.conflict_percent().round() as i64
                ),
            ]
        })
        .collect();
    render_aligned(&header, &body)
}

pub fn filter_report_csv(rows: &[FilterReportRow]) -> String {
    let header = [
        "dataset",
        "full",
        "closed_book_correct",
        "closed_book_wrong",
        "knowledge_conflict",
        "conflict_percent",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                r.counts.full.to_string(),
                r.counts.closed_book_correct.to_string(),
                r.counts.closed_book_wrong.to_string(),
                r.counts.knowledge_conflict.to_string(),
                format!("{}", r.conflict_percent()),
            ]
        })
        .collect();
    render_csv(&header, &body)
}

/// Per-category counts for one condition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub r: usize,
    pub u_c: usize,
    pub u_i: usize,
}

impl CategoryCounts {
    pub fn tally(outcomes: &[OpenBookOutcome]) -> CategoryCounts {
        let mut counts = CategoryCounts::default();
        for o in outcomes {
            match o.category {
                Category::R => counts.r += 1,
                Category::Uc => counts.u_c += 1,
                Category::Ui => counts.u_i += 1,
            }
        }
        counts
    }

    pub fn total(&self) -> usize {
        self.r + self.u_c + self.u_i
    }

    pub fn get(&self, category: Category) -> usize {
        match category {
            Category::R => self.r,
            Category::Uc => self.u_c,
            Category::Ui => self.u_i,
        }
    }

    pub fn percent(&self, category: Category) -> f64 {
        pct(self.get(category), self.total())
    }
}

/// Category proportions for one (dataset, condition), in the shape of the
/// answer-categorization table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryReportRow {
    pub dataset: String,
    pub condition: Condition,
    pub counts: CategoryCounts,
    pub generation_failures: usize,
    /// Baseline counts when this row is an intervention/ICL condition, so
    /// deltas are recomputable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<CategoryCounts>,
}

impl CategoryReportRow {
    pub fn delta_pp(&self, category: Category) -> Option<f64> {
        self.baseline
            .as_ref()
            .map(|b| self.counts.percent(category) - b.percent(category))
    }
}

pub fn category_report_text(rows: &[CategoryReportRow]) -> String {
    let header = ["Dataset", "Condition", "P(R)", "P(U_c)", "P(U_i)", "N"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let cell = |cat: Category| match row.delta_pp(cat) {
                Some(delta) => format!("{} {}", fmt1(row.counts.percent(cat)), fmt_delta(delta)),
                None => fmt1(row.counts.percent(cat)),
            };
            vec![
                row.dataset.clone(),
                row.condition.label().to_string(),
                cell(Category::R),
                cell(Category::Uc),
                cell(Category::Ui),
                format_count(row.counts.total()),
            ]
        })
        .collect();
    render_aligned(&header, &body)
}

pub fn category_report_csv(rows: &[CategoryReportRow]) -> String {
    let header = [
        "dataset",
        "condition",
        "n",
        "r_count",
        "u_c_count",
        "u_i_count",
        "p_r",
        "p_u_c",
        "p_u_i",
        "delta_p_r",
        "delta_p_u_c",
        "delta_p_u_i",
        "generation_failures",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let delta = |cat: Category| {
                row.delta_pp(cat)
                    .map(|d| format!("{d}"))
                    .unwrap_or_default()
            };
            vec![
                row.dataset.clone(),
                row.condition.label().to_string(),
                row.counts.total().to_string(),
                row.counts.r.to_string(),
                row.counts.u_c.to_string(),
                row.counts.u_i.to_string(),
                format!("{}", row.counts.percent(Category::R)),
                format!("{}", row.counts.percent(Category::Uc)),
                format!("{}", row.counts.percent(Category::Ui)),
                delta(Category::R),
                delta(Category::Uc),
                delta(Category::Ui),
                row.generation_failures.to_string(),
            ]
        })
        .collect();
    render_csv(&header, &body)
}

/// Containment rates across the three populations of interest: the whole
/// conflict set, the retain subset, and the correct-update subset. Empty
/// subsets report an absent rate rather than zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainmentRow {
    pub dataset: String,
    pub total: usize,
    pub total_contained: usize,
    pub r_total: usize,
    pub r_contained: usize,
    pub u_c_total: usize,
    pub u_c_contained: usize,
}

impl ContainmentRow {
    pub fn from_outcomes(dataset: &str, outcomes: &[OpenBookOutcome]) -> ContainmentRow {
        let mut row = ContainmentRow {
            dataset: dataset.to_string(),
            total: 0,
            total_contained: 0,
            r_total: 0,
            r_contained: 0,
            u_c_total: 0,
            u_c_contained: 0,
        };
        for o in outcomes {
            let contained = o.case.ap_in_context;
            row.total += 1;
            row.total_contained += contained as usize;
            match o.category {
                Category::R => {
                    row.r_total += 1;
                    row.r_contained += contained as usize;
                }
                Category::Uc => {
                    row.u_c_total += 1;
                    row.u_c_contained += contained as usize;
                }
                Category::Ui => {}
            }
        }
        row
    }

    pub fn rate_full(&self) -> Option<f64> {
        (self.total > 0).then(|| pct(self.total_contained, self.total))
    }

    pub fn rate_r(&self) -> Option<f64> {
        (self.r_total > 0).then(|| pct(self.r_contained, self.r_total))
    }

    pub fn rate_u_c(&self) -> Option<f64> {
        (self.u_c_total > 0).then(|| pct(self.u_c_contained, self.u_c_total))
    }
}

fn opt_pct(rate: Option<f64>) -> String {
    rate.map(fmt1).unwrap_or_else(|| "-".to_string())
}

pub fn containment_text(rows: &[ContainmentRow]) -> String {
    let header = ["Dataset", "KC set %", "R subset %", "U_c subset %"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                opt_pct(r.rate_full()),
                opt_pct(r.rate_r()),
                opt_pct(r.rate_u_c()),
            ]
        })
        .collect();
    render_aligned(&header, &body)
}

pub fn containment_csv(rows: &[ContainmentRow]) -> String {
    let header = [
        "dataset",
        "population",
        "contained",
        "total",
        "rate_percent",
    ];
    let mut body = Vec::new();
    for r in rows {
        let mut push = |population: &str, contained: usize, total: usize, rate: Option<f64>| {
            body.push(vec![
                r.dataset.clone(),
                population.to_string(),
                contained.to_string(),
                total.to_string(),
                rate.map(|x| format!("{x}")).unwrap_or_default(),
            ]);
        };
        push(
            "knowledge_conflict",
            r.total_contained,
            r.total,
            r.rate_full(),
        );
        push("retain", r.r_contained, r.r_total, r.rate_r());
        push("correct_update", r.u_c_contained, r.u_c_total, r.rate_u_c());
    }
    render_csv(&header, &body)
}

/// Failure-likelihood delta row: "+8.8*" when significant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReportRow {
    pub dataset: String,
    pub summary: ParametricBiasSummary,
}

impl BiasReportRow {
    pub fn formatted_delta(&self) -> String {
        let star = if self.summary.significant() { "*" } else { "" };
        format!("{:+.1}{star}", self.summary.delta_pp())
    }
}

pub fn bias_report_text(rows: &[BiasReportRow]) -> String {
    let header = ["Dataset", "Delta P(R) pp", "p (tail)", "p (pmf)"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                r.formatted_delta(),
                format!("{:.4}", r.summary.p_value_tail()),
                format!("{:.4}", r.summary.p_value_pmf()),
            ]
        })
        .collect();
    render_aligned(&header, &body)
}

pub fn bias_report_csv(rows: &[BiasReportRow]) -> String {
    let header = [
        "dataset",
        "delta_pp",
        "p_value_tail",
        "p_value_pmf",
        "significant_at_005",
        "n_contained",
        "n_not_contained",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                format!("{}", r.summary.delta_pp()),
                format!("{}", r.summary.p_value_tail()),
                format!("{}", r.summary.p_value_pmf()),
                r.summary.significant().to_string(),
                r.summary.retain.counts.n1.to_string(),
                r.summary.retain.counts.n0.to_string(),
            ]
        })
        .collect();
    render_csv(&header, &body)
}

/// Intervention comparison in the masking/injection table shape:
/// per-category proportions with signed deltas against baseline. Counts for
/// both sides travel with the row so the delta identity
/// (baseline + delta = intervention) is checkable in exact arithmetic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaReportRow {
    pub dataset: String,
    pub condition: Condition,
    pub baseline: CategoryCounts,
    pub intervention: CategoryCounts,
    /// How many prompts the intervention actually altered.
    pub altered: usize,
    pub generation_failures: usize,
    /// Proportions restricted to the containment group, where masking acts.
    pub contained_baseline: CategoryCounts,
    pub contained_intervention: CategoryCounts,
}

impl DeltaReportRow {
    pub fn baseline_pct(&self, category: Category) -> f64 {
        self.baseline.percent(category)
    }

    pub fn intervention_pct(&self, category: Category) -> f64 {
        self.intervention.percent(category)
    }

    pub fn delta_pp(&self, category: Category) -> f64 {
        self.intervention_pct(category) - self.baseline_pct(category)
    }

    pub fn cell(&self, category: Category) -> String {
        format!(
            "{} {}",
            fmt1(self.intervention_pct(category)),
            fmt_delta(self.delta_pp(category))
        )
    }
}

pub fn delta_report_text(rows: &[DeltaReportRow]) -> String {
    let header = [
        "Dataset",
        "Condition",
        "P(R)",
        "P(U_c)",
        "P(U_i)",
        "Altered",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                r.condition.label().to_string(),
                r.cell(Category::R),
                r.cell(Category::Uc),
                r.cell(Category::Ui),
                format_count(r.altered),
            ]
        })
        .collect();
    render_aligned(&header, &body)
}

pub fn delta_report_csv(rows: &[DeltaReportRow]) -> String {
    let header = [
        "dataset",
        "condition",
        "category",
        "baseline_count",
        "baseline_total",
        "intervention_count",
        "intervention_total",
        "baseline_pct",
        "intervention_pct",
        "delta_pp",
    ];
    let mut body = Vec::new();
    for r in rows {
        for category in Category::ALL {
            body.push(vec![
                r.dataset.clone(),
                r.condition.label().to_string(),
                category.label().to_string(),
                r.baseline.get(category).to_string(),
                r.baseline.total().to_string(),
                r.intervention.get(category).to_string(),
                r.intervention.total().to_string(),
                format!("{}", r.baseline_pct(category)),
                format!("{}", r.intervention_pct(category)),
                format!("{}", r.delta_pp(category)),
            ]);
        }
    }
    render_csv(&header, &body)
}

/// Prompt-search scores, one row per candidate.
pub fn prompt_search_csv(scores: &[crate::prompt::CandidateScore]) -> String {
    let header = [
        "index",
        "instruction",
        "score",
        "equivalent",
        "scored",
        "generation_failures",
        "disqualified",
    ];
    let body: Vec<Vec<String>> = scores
        .iter()
        .map(|s| {
            vec![
                s.index.to_string(),
                s.instruction.clone(),
                s.score.map(|x| format!("{x}")).unwrap_or_default(),
                s.equivalent.to_string(),
                s.scored.to_string(),
                s.generation_failures.to_string(),
                s.disqualified.to_string(),
            ]
        })
        .collect();
    render_csv(&header, &body)
}

/// Bundle of report payloads keyed by file name, ready to be written out.
pub fn to_named_json<T: Serialize>(value: &T) -> crate::error::Result<String> {
    let mut out = serde_json::to_string_pretty(value)?;
    out.push('\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_grouping() {
        assert_eq!(format_count(0), "0");
        assert_eq!(format_count(999), "999");
        assert_eq!(format_count(12836), "12,836");
        assert_eq!(format_count(1000000), "1,000,000");
    }

    #[test]
    fn filter_report_shapes() {
        let rows = vec![FilterReportRow {
            dataset: "NQ".into(),
            counts: BucketCounts {
                full: 12836,
                closed_book_correct: 5617,
                closed_book_wrong: 7219,
                knowledge_conflict: 6916,
            },
            skipped_parse: 0,
            generation_failures: 0,
        }];
        let text = filter_report_text(&rows);
        assert!(text.contains("NQ"), "{text}");
        assert!(text.contains("12,836"), "{text}");
        assert!(text.contains("6,916 (54%)"), "{text}");
        let csv = filter_report_csv(&rows);
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("NQ,12836,5617,7219,6916"));
    }

    #[test]
    fn filter_percent_equals_ratio() {
        let row = FilterReportRow {
            dataset: "X".into(),
            counts: BucketCounts {
                full: 100,
                closed_book_correct: 40,
                closed_book_wrong: 60,
                knowledge_conflict: 50,
            },
            skipped_parse: 0,
            generation_failures: 0,
        };
        assert_eq!(row.conflict_percent(), 50.0);
        assert!(filter_report_text(&[row]).contains("(50%)"));
    }

    #[test]
    fn category_percentages_sum_to_hundred() {
        let counts = CategoryCounts {
            r: 1,
            u_c: 56,
            u_i: 13,
        };
        let total: f64 = Category::ALL.iter().map(|c| counts.percent(*c)).sum();
        assert!((total - 100.0).abs() < 0.1);
    }

    #[test]
    fn category_report_row_shape() {
        // "NQ 1.4 79.6 19.0" proportions.
        let counts = CategoryCounts {
            r: 14,
            u_c: 796,
            u_i: 190,
        };
        let row = CategoryReportRow {
            dataset: "NQ".into(),
            condition: Condition::Baseline,
            counts,
            generation_failures: 0,
            baseline: None,
        };
        let text = category_report_text(&[row]);
        let line = text.lines().nth(1).unwrap();
        assert!(line.starts_with("NQ"), "{line}");
        assert!(line.contains("1.4"), "{line}");
        assert!(line.contains("79.6"), "{line}");
        assert!(line.contains("19.0"), "{line}");
    }

    #[test]
    fn delta_cells_match_table_shape() {
        let row = DeltaReportRow {
            dataset: "NQ".into(),
            condition: Condition::Masked,
            baseline: CategoryCounts {
                r: 14,
                u_c: 796,
                u_i: 190,
            },
            intervention: CategoryCounts {
                r: 7,
                u_c: 793,
                u_i: 200,
            },
            altered: 615,
            generation_failures: 0,
            contained_baseline: CategoryCounts::default(),
            contained_intervention: CategoryCounts::default(),
        };
        let cell = row.cell(Category::R);
        assert!(cell.starts_with("0.7 (-0.7)"), "{cell}");
        // Identity in exact rational arithmetic: b/nB + (i/nI - b/nB) = i/nI.
        for category in Category::ALL {
            let b = (
                row.baseline.get(category) as i128,
                row.baseline.total() as i128,
            );
            let i = (
                row.intervention.get(category) as i128,
                row.intervention.total() as i128,
            );
            // delta = i - b as a fraction over nB*nI.
            let delta_num = i.0 * b.1 - b.0 * i.1;
            // b + delta == i over the common denominator.
            assert_eq!(b.0 * i.1 + delta_num, i.0 * b.1);
        }
    }

    #[test]
    fn delta_formatting_handles_zero_and_signs() {
        assert_eq!(fmt_delta(0.0), "(0.0)");
        assert_eq!(fmt_delta(-0.04), "(0.0)");
        assert_eq!(fmt_delta(11.06), "(+11.1)");
        assert_eq!(fmt_delta(-9.5), "(-9.5)");
    }

    #[test]
    fn containment_empty_subset_is_absent_not_zero() {
        let row = ContainmentRow {
            dataset: "X".into(),
            total: 10,
            total_contained: 2,
            r_total: 0,
            r_contained: 0,
            u_c_total: 8,
            u_c_contained: 1,
        };
        assert_eq!(row.rate_r(), None);
        let text = containment_text(std::slice::from_ref(&row));
        let line = text.lines().nth(1).unwrap();
        assert!(line.contains('-'), "{line}");
        let csv = containment_csv(&[row]);
        let retain_line: Vec<&str> = csv.lines().filter(|l| l.contains("retain")).collect();
        assert!(
            retain_line[0].ends_with(','),
            "rate column empty: {retain_line:?}"
        );
    }

    #[test]
    fn all_retain_universal_containment() {
        use crate::dataset::QAExample;
        use crate::pipeline::{ConflictCase, OpenBookOutcome};
        let outcomes: Vec<OpenBookOutcome> = (0..4)
            .map(|i| OpenBookOutcome {
                case: ConflictCase {
                    example: QAExample {
                        id: format!("e{i}"),
                        question: "q".into(),
                        context: "c".into(),
                        gold_answers: vec!["g".into()],
                        source_dataset: "T".into(),
                    },
                    a_p: "p".into(),
                    ap_in_context: true,
                },
                a_c: "p".into(),
                category: Category::R,
                condition: Condition::Baseline,
            })
            .collect();
        let row = ContainmentRow::from_outcomes("X", &outcomes);
        assert_eq!(row.rate_full(), Some(100.0));
        assert_eq!(row.rate_r(), Some(100.0));
        // No correct updates at all: the subset rate is absent, not zero.
        assert_eq!(row.rate_u_c(), None);
    }

    #[test]
    fn bias_star_formatting() {
        use crate::stats::{bias_test, GroupCounts, SuccessDefinition};
        let retain = bias_test(&GroupCounts {
            n0: 1000,
            m0: 50,
            n1: 500,
            m1: 200,
            success_definition: SuccessDefinition::RetainFailure,
        })
        .unwrap();
        let success = bias_test(&GroupCounts {
            n0: 1000,
            m0: 950,
            n1: 500,
            m1: 300,
            success_definition: SuccessDefinition::CorrectUpdate,
        })
        .unwrap();
        let row = BiasReportRow {
            dataset: "NQ".into(),
            summary: ParametricBiasSummary { retain, success },
        };
        assert_eq!(row.formatted_delta(), "+35.0*");
    }
}
