#include "snag/sampling.hpp"

namespace snag::sampling {

std::string to_string(SamplerKind k) {
    return k == SamplerKind::QueryCentric ? "query" : "video";
}

SamplerKind sampler_kind_from(const std::string& s) {
    if (s == "query") return SamplerKind::QueryCentric;
    if (s == "video") return SamplerKind::VideoCentric;
    throw ConfigError("unknown sampler kind: " + s + " (expected 'query' or 'video')");
}

int64_t SamplingIndex::m_plus(const std::string& video_id) const {
    for (const VideoSnippets& v : videos) {
        if (v.video_id == video_id) return static_cast<int64_t>(v.snippets.size());
    }
    return 0;
}

SamplingIndex build_index(const data::Corpus& corpus, int64_t t_w, int64_t stride) {
    SamplingIndex index;
    for (const data::FeatureSequence& video : corpus.videos) {
        SamplingIndex::VideoSnippets entry;
        entry.video_id = video.video_id;
        for (const data::Snippet& s : data::enumerate_snippets(video, t_w, stride)) {
            auto queries = data::valid_queries_for(s, corpus);
            if (queries.empty()) continue;  // snippets without queries are discarded
            entry.query_slots += static_cast<int64_t>(queries.size());
            index.total_triplets += static_cast<int64_t>(queries.size());
            entry.snippets.push_back(SamplingIndex::SnippetQueries{s, std::move(queries)});
        }
        if (!entry.snippets.empty()) {
            index.m_plus_total += static_cast<int64_t>(entry.snippets.size());
            index.videos.push_back(std::move(entry));
        }
    }
    for (const data::QueryTokens& q : corpus.queries) {
        SamplingIndex::QueryCover cover;
        cover.query = &q;
        for (const SamplingIndex::VideoSnippets& v : index.videos) {
            if (v.video_id != q.video_id) continue;
            for (const SamplingIndex::SnippetQueries& sq : v.snippets) {
                if (sq.snippet.covers(q.target)) cover.covering.push_back(sq.snippet);
            }
        }
        if (!cover.covering.empty()) index.queries.push_back(std::move(cover));
    }
    if (index.total_triplets == 0) {
        throw ConfigError("corpus contains no valid (snippet, query) triplet at t_w=" +
                          std::to_string(t_w) + ", stride=" + std::to_string(stride));
    }
    return index;
}

Batch sample_query_centric(const SamplingIndex& index, int64_t batch_size, Rng& rng) {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    Batch batch;
    batch.groups.reserve(static_cast<size_t>(batch_size));
    for (int64_t i = 0; i < batch_size; ++i) {
        const auto& cover = index.queries[static_cast<size_t>(rng.uniform_int(
            static_cast<int64_t>(index.queries.size())))];
        const data::Snippet& snippet = cover.covering[static_cast<size_t>(
            rng.uniform_int(static_cast<int64_t>(cover.covering.size())))];
        batch.groups.push_back(Group{snippet, {cover.query}});
    }
    return batch;
}

Batch sample_video_centric(const SamplingIndex& index, int64_t batch_size, int64_t b_q, Rng& rng) {
    if (batch_size < 1 || b_q < 1) throw ConfigError("batch size and B_q must be >= 1");
    if (batch_size % b_q != 0) {
        throw ConfigError("B_q=" + std::to_string(b_q) + " must divide batch size " +
                          std::to_string(batch_size));
    }
    Batch batch;
    const int64_t n_groups = batch_size / b_q;
    batch.groups.reserve(static_cast<size_t>(n_groups));
    for (int64_t gi = 0; gi < n_groups; ++gi) {
        // Video k' with probability M_+^(k) / sum_k M_+^(k).
        int64_t r = rng.uniform_int(index.m_plus_total);
        const SamplingIndex::VideoSnippets* video = nullptr;
        for (const auto& v : index.videos) {
            const int64_t m = static_cast<int64_t>(v.snippets.size());
            if (r < m) {
                video = &v;
                break;
            }
            r -= m;
        }
        // Snippet i' with probability N_i / sum_i N_i within the video.
        int64_t s = rng.uniform_int(video->query_slots);
        const SamplingIndex::SnippetQueries* snippet = nullptr;
        for (const auto& sq : video->snippets) {
            const int64_t n = static_cast<int64_t>(sq.queries.size());
            if (s < n) {
                snippet = &sq;
                break;
            }
            s -= n;
        }
        // B_q queries uniformly with replacement; duplicates stay in the loss.
        Group group;
        group.snippet = snippet->snippet;
        for (int64_t qi = 0; qi < b_q; ++qi) {
            group.queries.push_back(snippet->queries[static_cast<size_t>(
                rng.uniform_int(static_cast<int64_t>(snippet->queries.size())))]);
        }
        batch.groups.push_back(std::move(group));
    }
    return batch;
}

}  // namespace snag::sampling
