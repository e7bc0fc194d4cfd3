use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid plane set: {0}")]
    InvalidPlaneSet(String),
    #[error("mesh is not convex: vertex {vertex} violates face plane {plane} by {violation:.3e}")]
    NonConvexMesh {
        vertex: usize,
        plane: usize,
        violation: f64,
    },
    #[error("mesh is degenerate (volume {volume:.3e} m^3)")]
    DegenerateMesh { volume: f64 },
    #[error("malformed mesh: {0}")]
    MalformedMesh(String),
    #[error("projection solver failed: {0}")]
    SolverFailure(String),
    #[error("constraint set is infeasible")]
    InfeasibleConstraints,
    #[error("iteration limit ({0}) reached")]
    IterationLimit(usize),
    #[error("contact normal is degenerate at query {query} (gradient norm {norm:.3e})")]
    DegenerateNormal { query: usize, norm: f64 },
    #[error("non-finite result in {0}")]
    NonFiniteResult(&'static str),
    #[error("non-finite objective")]
    NonFiniteObjective,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown scene '{0}'")]
    UnknownScene(String),
    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
