//! Independent checks of the streamconv contracts. Each module returns
//! plain outcomes so the same code drives ordinary tests and the
//! acceptance report.

pub mod causality;
pub mod contracts;
pub mod gradcheck;
pub mod toy;

/// Cases examined and every violation found.
#[derive(Clone, Debug, Default)]
pub struct Tally {
    pub cases: usize,
    pub failures: Vec<String>,
}

impl Tally {
    pub fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        match self.failures.first() {
            None => format!("{} cases", self.cases),
            Some(f) => format!("{} of {} cases failed, first: {f}", self.failures.len(), self.cases),
        }
    }
}
