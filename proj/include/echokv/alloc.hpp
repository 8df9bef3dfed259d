#pragma once

#include <algorithm>
#include <cstddef>

namespace echokv {

// Byte counter for auxiliary buffers allocated by the loss/gradient kernels
// (beyond model weights and cache state). Used to compare the memory
// footprint of the two stage-2 objectives.
struct AllocTracker {
    size_t current = 0;
    size_t peak = 0;

    void add(size_t bytes) {
        current += bytes;
        peak = std::max(peak, current);
    }
    void release(size_t bytes) { current -= std::min(bytes, current); }
    void reset() { current = 0, peak = 0; }
};

// charges `bytes` for the lifetime of the scope; no-op when tracker is null
class ScopedCharge {
public:
    ScopedCharge(AllocTracker* t, size_t bytes) : tracker_(t), bytes_(bytes) {
        if (tracker_) tracker_->add(bytes_);
    }
    ~ScopedCharge() {
        if (tracker_) tracker_->release(bytes_);
    }
    ScopedCharge(const ScopedCharge&) = delete;
    ScopedCharge& operator=(const ScopedCharge&) = delete;

private:
    AllocTracker* tracker_;
    size_t bytes_;
};

} // namespace echokv
