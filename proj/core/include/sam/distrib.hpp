#pragma once

#include <string>
#include <vector>

#include "sam/trainer.hpp"
#include "sam/wire.hpp"

namespace sam {

/// Master/worker training: workers hold the images and latent variables and
/// return only fixed-size aggregates; the master holds the model and runs
/// the same schedule as single-process train().

struct WorkerOptions {
    int threads = 1;
    FrameObserver observer;
};

/// Serve one shard until a SHUTDOWN frame arrives. Malformed frames get an
/// error reply and a connection close; the worker keeps listening.
void serve_worker(const ImageDataset& shard, std::uint16_t port, const WorkerOptions& opt = {});

/// Same, on an already-bound listener (ephemeral ports in tests).
void serve_worker_on(Listener& listener, const ImageDataset& shard,
                     const WorkerOptions& opt = {});

struct MasterOptions {
    FrameObserver observer;
    std::function<void(const IterationLog&)> on_iteration;
};

/// Train against workers at the given endpoints ("host:port"). Aggregates
/// are combined in endpoint-list order; any worker failure aborts the run.
std::pair<ModelState, TrainReport> master_train(const std::vector<std::string>& endpoints,
                                                const HyperParams& hyper, std::uint64_t seed,
                                                const MasterOptions& opt = {});

} // namespace sam
