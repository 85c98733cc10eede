#pragma once

#include <string>
#include <vector>

namespace fedattn {

// The set of block indices (1-based, <= M) at which KV exchange happens.
// Uniform-H is the common case; the named schemes concentrate exchanges in
// different depth ranges. An empty set means fully local execution.
struct SyncSchedule {
    int M = 0;
    std::vector<int> sync_blocks;  // strictly increasing

    bool is_sync(int block) const;
    void validate() const;
};

enum class ScheduleKind { Uniform, ShallowHalf, DeepHalf, Progressive, Regressive };

const char* schedule_kind_name(ScheduleKind k);
ScheduleKind schedule_kind_from_name(const std::string& name);

// Sync at H, 2H, ..., M. H must divide M.
SyncSchedule uniform_schedule(int M, int H);

// T sync blocks placed per the scheme:
//  ShallowHalf: evenly spaced within blocks 1..ceil(M/2)
//  DeepHalf:    evenly spaced within blocks ceil(M/2)+1..M
//  Progressive: strictly increasing gaps summing to M (shallow syncs first)
//  Regressive:  the Progressive gap sequence reversed (ends densely at M)
SyncSchedule named_schedule(ScheduleKind kind, int M, int T);

}  // namespace fedattn
