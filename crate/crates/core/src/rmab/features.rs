//! Beneficiary feature catalog used by the desk environment.
//!
//! Each group is one-hot per arm. Names are valid reward-DSL feature tokens.

pub struct FeatureGroup {
    pub name: &'static str,
    pub members: &'static [&'static str],
}

pub const CATALOG: &[FeatureGroup] = &[
    FeatureGroup {
        name: "age",
        members: &["youngest_age", "second_youngest_age", "middle_age", "second_oldest_age", "oldest_age"],
    },
    FeatureGroup {
        name: "education",
        members: &["lowest_education", "second_lowest_education", "third_lowest_education", "high_education"],
    },
    FeatureGroup {
        name: "income",
        members: &["lowest_income", "second_lowest_income", "third_lowest_income", "high_income"],
    },
    FeatureGroup {
        name: "call_slot",
        members: &["8_30-10_30am", "10_30-12_30pm", "12_30-3pm", "3_30-5_30pm", "5_30-7_30pm"],
    },
    FeatureGroup {
        name: "registration",
        members: &["NGO_registered", "ARMMAN_registered", "PHC_registered"],
    },
    FeatureGroup { name: "language", members: &["speaks_hindi", "speaks_marathi"] },
];

pub fn all_features() -> Vec<&'static str> {
    CATALOG.iter().flat_map(|g| g.members.iter().copied()).collect()
}

pub fn group_of(feature: &str) -> Option<&'static FeatureGroup> {
    CATALOG.iter().find(|g| g.members.contains(&feature))
}
