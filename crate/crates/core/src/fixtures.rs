//! Bundled BOINC profile set and scenarios, served under the repository URL
//! the profiles reference.

use crate::profile::{Fetch, FetchError};

pub const REPOSITORY_BASE: &str = "http://git.erp5.org/gitweb/slapos.git/blob/refs/heads/grid-computing:";

pub const BOINC_APPLICATION_LISTING: &str = include_str!("../fixtures/slapos/software/boinc/boinc-application.cfg");
pub const BOINC_APP_LISTING: &str = include_str!("../fixtures/slapos/software/boinc/boinc-app.cfg");

const FILES: &[(&str, &str)] = &[
    ("component/boinc/buildout.cfg", include_str!("../fixtures/slapos/component/boinc/buildout.cfg")),
    ("component/boinc-client/buildout.cfg", include_str!("../fixtures/slapos/component/boinc-client/buildout.cfg")),
    ("component/dash/buildout.cfg", include_str!("../fixtures/slapos/component/dash/buildout.cfg")),
    ("stack/boinc/buildout.cfg", include_str!("../fixtures/slapos/stack/boinc/buildout.cfg")),
    ("stack/boinc/instance-boinc.cfg", include_str!("../fixtures/slapos/stack/boinc/instance-boinc.cfg")),
    ("stack/boinc/instance-mariadb.cfg", include_str!("../fixtures/slapos/stack/boinc/instance-mariadb.cfg")),
    ("software/boinc/software.cfg", include_str!("../fixtures/slapos/software/boinc/software.cfg")),
    ("software/boinc/boinc-application.cfg", BOINC_APPLICATION_LISTING),
    ("software/boinc/boinc-app.cfg", BOINC_APP_LISTING),
    (
        "software/boinc/instance-boinc-server.cfg",
        include_str!("../fixtures/slapos/software/boinc/instance-boinc-server.cfg"),
    ),
    (
        "software/boinc/instance-boinc-client.cfg",
        include_str!("../fixtures/slapos/software/boinc/instance-boinc-client.cfg"),
    ),
    ("software/boinc/templates/input", include_str!("../fixtures/slapos/software/boinc/templates/input")),
    (
        "software/boinc/templates/template_result.xml",
        include_str!("../fixtures/slapos/software/boinc/templates/template_result.xml"),
    ),
    (
        "software/boinc/templates/template_wu.xml",
        include_str!("../fixtures/slapos/software/boinc/templates/template_wu.xml"),
    ),
    ("software/boinc-e2e/software.cfg", include_str!("../fixtures/slapos/software/boinc-e2e/software.cfg")),
];

pub const SCENARIOS: &[(&str, &str)] = &[
    ("boinc-e2e", include_str!("../fixtures/scenarios/boinc-e2e.cfg")),
    ("boinc-density", include_str!("../fixtures/scenarios/boinc-density.cfg")),
];

pub fn scenario(name: &str) -> Option<&'static str> {
    SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// URL of a file in the bundled repository, e.g. `software/boinc/software.cfg`.
pub fn url(path: &str) -> String {
    format!("{REPOSITORY_BASE}/{path}")
}

pub fn boinc_release() -> String {
    url("software/boinc/software.cfg")
}

pub fn boinc_e2e_release() -> String {
    url("software/boinc-e2e/software.cfg")
}

/// Answers fetches for the bundled repository; anything else is unfetchable.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixtureStore;

impl Fetch for FixtureStore {
    fn fetch(&self, origin: &str) -> Result<String, FetchError> {
        origin
            .strip_prefix(REPOSITORY_BASE)
            .and_then(|p| p.strip_prefix('/'))
            .and_then(|p| FILES.iter().find(|(name, _)| *name == p))
            .map(|(_, text)| text.to_string())
            .ok_or_else(|| FetchError(origin.to_string()))
    }
}
