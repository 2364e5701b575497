use thiserror::Error;

/// Failure raised by a loop-body operator.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct BodyError(pub String);

impl BodyError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

/// A loop body with one operator per resource kind.
///
/// Both operators must give the same result for the same range, and must be
/// safe to call concurrently on disjoint ranges.
pub trait LoopBody: Sync {
    fn cpu_operator(&self, begin: usize, end: usize) -> Result<(), BodyError>;
    fn accel_operator(&self, begin: usize, end: usize) -> Result<(), BodyError>;
}

impl<B: LoopBody + ?Sized> LoopBody for &B {
    fn cpu_operator(&self, begin: usize, end: usize) -> Result<(), BodyError> {
        (**self).cpu_operator(begin, end)
    }

    fn accel_operator(&self, begin: usize, end: usize) -> Result<(), BodyError> {
        (**self).accel_operator(begin, end)
    }
}

/// Body built from two closures.
pub struct FnBody<C, A> {
    cpu: C,
    accel: A,
}

impl<C, A> FnBody<C, A>
where
    C: Fn(usize, usize) -> Result<(), BodyError> + Sync,
    A: Fn(usize, usize) -> Result<(), BodyError> + Sync,
{
    pub fn new(cpu: C, accel: A) -> Self {
        Self { cpu, accel }
    }
}

impl<C, A> LoopBody for FnBody<C, A>
where
    C: Fn(usize, usize) -> Result<(), BodyError> + Sync,
    A: Fn(usize, usize) -> Result<(), BodyError> + Sync,
{
    fn cpu_operator(&self, begin: usize, end: usize) -> Result<(), BodyError> {
        (self.cpu)(begin, end)
    }

    fn accel_operator(&self, begin: usize, end: usize) -> Result<(), BodyError> {
        (self.accel)(begin, end)
    }
}

/// Body that does nothing; useful when only the schedule matters.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoopBody;

impl LoopBody for NoopBody {
    fn cpu_operator(&self, _begin: usize, _end: usize) -> Result<(), BodyError> {
        Ok(())
    }

    fn accel_operator(&self, _begin: usize, _end: usize) -> Result<(), BodyError> {
        Ok(())
    }
}
