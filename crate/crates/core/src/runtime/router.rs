use std::collections::HashMap;
use std::sync::Arc;

use bytes::Bytes;
use http::{Method, Request, Response};

pub const ATTESTATION_PATH: &str = "/attestation";
pub const SECRET_PATH: &str = "/enclave/secret";

pub type Handler = Arc<dyn Fn(&Request<Bytes>) -> Response<Bytes> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("route {0} {1} already registered")]
    DuplicateRoute(Method, String),
    #[error("path {0} is reserved by the runtime")]
    ReservedPath(String),
}

/// Application routes keyed by exact method and path.
#[derive(Default, Clone)]
pub struct Router {
    routes: HashMap<(Method, String), Handler>,
}

impl Router {
    pub fn add(&mut self, method: Method, path: &str, handler: Handler) -> Result<(), RouteError> {
        let normalized = path.trim_end_matches('/');
        if [ATTESTATION_PATH, SECRET_PATH].contains(&normalized) {
            return Err(RouteError::ReservedPath(path.to_string()));
        }
        let key = (method, path.to_string());
        if self.routes.contains_key(&key) {
            return Err(RouteError::DuplicateRoute(key.0, key.1));
        }
        self.routes.insert(key, handler);
        Ok(())
    }

    pub fn lookup(&self, method: &Method, path: &str) -> Option<&Handler> {
        self.routes.get(&(method.clone(), path.to_string()))
    }

    pub fn has_path(&self, path: &str) -> bool {
        self.routes.keys().any(|(_, p)| p == path)
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }
}
