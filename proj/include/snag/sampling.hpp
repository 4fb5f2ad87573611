#pragma once

#include <string>
#include <vector>

#include "snag/data.hpp"

namespace snag::sampling {

enum class SamplerKind { QueryCentric, VideoCentric };

std::string to_string(SamplerKind k);
SamplerKind sampler_kind_from(const std::string& s);

// Exhaustive index over the valid-triplet set (snippet, query, moment).
// Snippets without queries are discarded, as are queries no snippet covers.
struct SamplingIndex {
    struct SnippetQueries {
        data::Snippet snippet;
        std::vector<const data::QueryTokens*> queries;  // N_i >= 1
    };
    struct VideoSnippets {
        std::string video_id;
        std::vector<SnippetQueries> snippets;  // M_+ = snippets.size()
        int64_t query_slots = 0;               // sum of N_i
    };
    struct QueryCover {
        const data::QueryTokens* query;
        std::vector<data::Snippet> covering;
    };

    std::vector<VideoSnippets> videos;  // only videos with M_+ >= 1
    std::vector<QueryCover> queries;    // only queries with >= 1 covering snippet
    int64_t total_triplets = 0;
    int64_t m_plus_total = 0;

    int64_t m_plus(const std::string& video_id) const;
};

SamplingIndex build_index(const data::Corpus& corpus, int64_t t_w, int64_t stride);

// Batch of groups; a group shares one snippet (and thus one video encoding)
// across its queries. Query-centric batches have groups of size 1.
struct Group {
    data::Snippet snippet;
    std::vector<const data::QueryTokens*> queries;
};

struct Batch {
    std::vector<Group> groups;

    int64_t size() const {
        int64_t n = 0;
        for (const Group& g : groups) n += static_cast<int64_t>(g.queries.size());
        return n;
    }
};

// Draw a (query, moment) uniformly, then a covering snippet uniformly;
// repeated batch_size times.
Batch sample_query_centric(const SamplingIndex& index, int64_t batch_size, Rng& rng);

// Draw a video proportional to M_+, a snippet proportional to N_i, then
// b_q queries uniformly WITH replacement from the snippet's valid queries;
// repeated batch_size / b_q times. b_q must divide batch_size.
Batch sample_video_centric(const SamplingIndex& index, int64_t batch_size, int64_t b_q, Rng& rng);

}  // namespace snag::sampling
