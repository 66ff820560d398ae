//! The seven health use cases (allergies, clinical notes, immunizations,
//! lab results, prescriptions, procedures, vital signs) as ledger schemas
//! and as scripted scenarios that drive issuers, holders and verifiers
//! end to end.

pub mod catalog;
pub mod scenario;

pub use catalog::{builtin_schemas, catalog, registration_transactions, Catalog, CatalogSchema};
pub use healthreg_agent::qr;
pub use scenario::{
    builtin_scenarios, run_scenario, scenario, Scenario, ScenarioError, ScenarioRun, Step, TranscriptLine,
    SCENARIO_NAMES,
};
