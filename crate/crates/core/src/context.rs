//! Everything a pipeline needs for one run: config, prompts, clients, pool.

use std::sync::Arc;

use crate::backend::{CallLedger, ChatBackend, ChatRequest, Client, LedgerSnapshot, RetryPolicy};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::parallel::Executor;
use crate::prompt::PromptSet;
use crate::rng::branch_seed;
use crate::types::{Role, Transcript};

/// Model bindings per agent role. `internal` serves both the preference
/// summarizer and the internal user simulator.
#[derive(Debug, Clone)]
pub struct Agents {
    pub user: Client,
    pub recommender: Client,
    pub internal: Client,
}

impl Agents {
    /// Binds backends to one shared ledger. The internal user and summarizer
    /// run on the recommender's model.
    pub fn new(user: Arc<dyn ChatBackend>, recommender: Arc<dyn ChatBackend>) -> Self {
        let ledger = Arc::new(CallLedger::new());
        let recommender = Client::new(recommender, ledger.clone());
        Self { user: Client::new(user, ledger), internal: recommender.clone(), recommender }
    }

    /// A single backend playing every role.
    pub fn single(backend: Arc<dyn ChatBackend>) -> Self {
        Self::new(backend.clone(), backend)
    }

    pub fn with_internal(mut self, internal: Arc<dyn ChatBackend>) -> Self {
        self.internal = Client::new(internal, self.recommender.ledger().clone());
        self
    }

    pub fn with_retry(self, retry: RetryPolicy) -> Self {
        Self {
            user: self.user.with_retry(retry),
            recommender: self.recommender.with_retry(retry),
            internal: self.internal.with_retry(retry),
        }
    }

    pub fn ledger(&self) -> &Arc<CallLedger> {
        self.recommender.ledger()
    }

    pub fn scoped(&self, scope: Arc<CallLedger>) -> Self {
        Self {
            user: self.user.scoped(scope.clone()),
            recommender: self.recommender.scoped(scope.clone()),
            internal: self.internal.scoped(scope),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: RunConfig,
    pub prompts: PromptSet,
    pub agents: Agents,
    pub exec: Executor,
}

impl RunContext {
    pub fn new(config: RunConfig, prompts: PromptSet, agents: Agents) -> Self {
        let exec = Executor::new(config.concurrency_limit);
        Self { config, prompts, agents, exec }
    }

    pub fn with_executor(mut self, exec: Executor) -> Self {
        self.exec = exec;
        self
    }

    /// A copy whose calls are additionally counted in the returned ledger.
    pub fn scoped(&self) -> (RunContext, Arc<CallLedger>) {
        let scope = Arc::new(CallLedger::new());
        let ctx = RunContext { agents: self.agents.scoped(scope.clone()), ..self.clone() };
        (ctx, scope)
    }

    pub fn ledger_snapshot(&self) -> LedgerSnapshot {
        self.agents.ledger().snapshot()
    }

    pub(crate) fn seed(&self, branch: usize) -> u64 {
        branch_seed(self.config.rng_seed, branch)
    }

    /// One recommender completion for `history`.
    pub fn recommend(&self, history: &Transcript, temperature: f64, branch: usize) -> Result<String> {
        let messages = self.prompts.render_recommender(history)?;
        let request = ChatRequest {
            messages,
            assistant_role: Role::Recommender,
            temperature,
            max_tokens: self.config.dialogue_max_tokens,
            seed: Some(self.seed(branch)),
            tag: crate::backend::tags::RECOMMENDER.into(),
        };
        self.agents
            .recommender
            .complete(&request)
            .map_err(|e| Error::backend("recommender turn", e))
    }
}
