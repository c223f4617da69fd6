use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BUDGET: usize = 5000;

/// Who a charge is attributed to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Charge {
    Example(usize),
    Phase(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example: usize,
    pub queries: usize,
    /// `None` until the attack on this example has finished.
    pub success: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub budget: usize,
    pub used: usize,
    pub per_example: Vec<ExampleRecord>,
    pub phases: BTreeMap<String, usize>,
}

#[derive(Debug, Default)]
struct State {
    used: usize,
    per_example: Vec<ExampleRecord>,
    index: BTreeMap<usize, usize>,
    phases: BTreeMap<String, usize>,
}

/// Shared query counter. All mutation goes through one mutex, so charges
/// from concurrent attacks are linearizable and `used` never passes `budget`.
#[derive(Debug)]
pub struct QueryLedger {
    budget: usize,
    state: Mutex<State>,
}

impl Default for QueryLedger {
    fn default() -> Self {
        Self::new(DEFAULT_BUDGET)
    }
}

impl QueryLedger {
    pub fn new(budget: usize) -> Self {
        Self { budget, state: Mutex::new(State::default()) }
    }

    pub fn unbounded() -> Self {
        Self::new(usize::MAX)
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn used(&self) -> usize {
        self.lock().used
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Charges `n` queries atomically, or none if that would exceed the budget.
    pub fn charge(&self, n: usize, to: &Charge) -> Result<()> {
        let mut st = self.lock();
        if n > self.budget - st.used {
            return Err(Error::BudgetExhausted { used: st.used, budget: self.budget, requested: n });
        }
        st.used += n;
        match to {
            Charge::Example(id) => {
                let i = match st.index.get(id) {
                    Some(&i) => i,
                    None => {
                        let i = st.per_example.len();
                        st.per_example.push(ExampleRecord { example: *id, queries: 0, success: None });
                        st.index.insert(*id, i);
                        i
                    }
                };
                st.per_example[i].queries += n;
            }
            Charge::Phase(name) => *st.phases.entry(name.clone()).or_insert(0) += n,
        }
        Ok(())
    }

    /// Records the outcome of an example, creating a zero-query record if needed.
    pub fn finish(&self, example: usize, success: bool) {
        let mut st = self.lock();
        let i = match st.index.get(&example) {
            Some(&i) => i,
            None => {
                let i = st.per_example.len();
                st.per_example.push(ExampleRecord { example, queries: 0, success: None });
                st.index.insert(example, i);
                i
            }
        };
        st.per_example[i].success = Some(success);
    }

    pub fn queries_for(&self, example: usize) -> usize {
        let st = self.lock();
        st.index.get(&example).map_or(0, |&i| st.per_example[i].queries)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let st = self.lock();
        LedgerSnapshot {
            budget: self.budget,
            used: st.used,
            per_example: st.per_example.clone(),
            phases: st.phases.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.snapshot())?)?;
        Ok(())
    }
}

impl LedgerSnapshot {
    /// `used` equals the attributed total.
    pub fn is_consistent(&self) -> bool {
        let attributed: usize =
            self.per_example.iter().map(|r| r.queries).sum::<usize>() + self.phases.values().sum::<usize>();
        attributed == self.used && self.used <= self.budget
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn charges_are_attributed() {
        let l = QueryLedger::new(10);
        l.charge(3, &Charge::Example(7)).unwrap();
        l.charge(2, &Charge::Phase("correspondence".into())).unwrap();
        l.charge(1, &Charge::Example(7)).unwrap();
        l.finish(7, true);
        let s = l.snapshot();
        assert_eq!(s.used, 6);
        assert_eq!(s.per_example, vec![ExampleRecord { example: 7, queries: 4, success: Some(true) }]);
        assert!(s.is_consistent());
    }

    #[test]
    fn refuses_over_budget_without_partial_charge() {
        let l = QueryLedger::new(5);
        l.charge(4, &Charge::Example(0)).unwrap();
        let e = l.charge(2, &Charge::Example(0)).unwrap_err();
        assert!(matches!(e, Error::BudgetExhausted { used: 4, budget: 5, requested: 2 }));
        assert_eq!(l.used(), 4);
        l.charge(1, &Charge::Example(0)).unwrap();
        assert!(l.charge(1, &Charge::Example(1)).is_err());
    }

    #[test]
    fn concurrent_charges_never_overshoot() {
        let l = Arc::new(QueryLedger::new(1000));
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let l = l.clone();
                std::thread::spawn(move || {
                    let mut ok = 0;
                    for _ in 0..200 {
                        if l.charge(3, &Charge::Example(t)).is_ok() {
                            ok += 3;
                        }
                    }
                    ok
                })
            })
            .collect();
        let total: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
        let s = l.snapshot();
        assert_eq!(s.used, total);
        assert!(s.used <= 1000 && s.used > 990);
        assert!(s.is_consistent());
    }
}
