#pragma once

namespace moco {

/// Train mode normalises with batch statistics and updates running state;
/// eval mode applies the running state only.
enum class Mode { kTrain, kEval };

}  // namespace moco
