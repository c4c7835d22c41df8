#pragma once

/* C interface to the continual video-instance segmentation workbench.
 * Every call returns a status code; on failure, crisp_last_error() holds a
 * single-line message for the calling thread until the next failing call. */

#ifdef __cplusplus
extern "C" {
#endif

typedef enum crisp_status {
    CRISP_OK = 0,
    CRISP_ERR_PARAM = 1,      /* argument outside its documented range   */
    CRISP_ERR_SHAPE = 2,      /* incompatible dimensions                 */
    CRISP_ERR_DEGENERATE = 3, /* numerically degenerate input            */
    CRISP_ERR_CONTRACT = 4,   /* pre/postcondition violated              */
    CRISP_ERR_CONFIG = 5,     /* config parse or validation failure      */
    CRISP_ERR_IO = 6,         /* filesystem or serialization failure     */
    CRISP_ERR_UNKNOWN = 7
} crisp_status;

/* Message of the calling thread's most recent failure; never NULL. */
const char* crisp_last_error(void);

/* Opaque experiment configuration. */
typedef struct crisp_config crisp_config;

crisp_status crisp_config_load(const char* path, crisp_config** out);
/* Parse config text directly; `name` labels error messages. */
crisp_status crisp_config_parse(const char* text, const char* name,
                                crisp_config** out);
void crisp_config_free(crisp_config* config);

/* Overrides applied after loading (CLI flags / environment). */
crisp_status crisp_config_set_output_dir(crisp_config* config, const char* dir);
/* which: "no-arsp" | "no-isc" | "no-ic" */
crisp_status crisp_config_ablate(crisp_config* config, const char* which);
/* strategy: "pca" | "replicate_average" */
crisp_status crisp_config_set_init(crisp_config* config, const char* strategy);

/* Write per-step dataset files; force != 0 allows overwriting. */
crisp_status crisp_generate(const crisp_config* config, int force);

/* Train the protocol; writes report.json, train_log.jsonl, and per-step
 * checkpoints. fr_indicator: "corrected" | "literal". workers >= 1. */
crisp_status crisp_run(const crisp_config* config, const char* fr_indicator,
                       unsigned workers);

/* Write correlation.txt, distances.txt, embeddings.csv for a checkpoint.
 * out_dir NULL or empty means next to the checkpoint. */
crisp_status crisp_diagnose(const char* checkpoint_path, const char* out_dir);

/* Render a report.json as text; *out is malloc'd, free with
 * crisp_string_free. */
crisp_status crisp_report(const char* report_path, char** out);
void crisp_string_free(char* text);

#ifdef __cplusplus
} /* extern "C" */
#endif
