pub struct ParamVector;
pub struct RoundConfig;
pub struct RoundReport;
pub struct Scheme;
