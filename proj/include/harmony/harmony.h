/* C interface to the harmony library.
 *
 * Every function returns an hm_status. On failure, hm_last_error() returns a
 * message for the calling thread that stays valid until that thread's next
 * call into the library. Strings handed out through char** outputs are owned
 * by the caller and released with hm_string_free.
 */
#ifndef HARMONY_H
#define HARMONY_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define HM_API __declspec(dllexport)
#else
#define HM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum hm_status {
    HM_OK = 0,
    HM_ERR_CONFIG = 1,
    HM_ERR_DIMENSION = 2,
    HM_ERR_NUMERIC = 3,
    HM_ERR_PRECONDITION = 4,
    HM_ERR_SELECTION = 5,
    HM_ERR_PARSE = 6,
    HM_ERR_SCHEMA = 7,
    HM_ERR_IO = 8,
    HM_ERR_VERSION = 9,
    HM_ERR_ARGUMENT = 10, /* null handle or pointer */
    HM_ERR_INTERNAL = 11
} hm_status;

typedef struct hm_run hm_run;               /* parsed run configuration */
typedef struct hm_checkpoint hm_checkpoint; /* loaded checkpoint */

HM_API const char* hm_version(void);
HM_API const char* hm_status_name(hm_status status);
HM_API const char* hm_last_error(void);
HM_API void hm_string_free(char* s);

/* Run configuration */
HM_API hm_status hm_run_load(const char* config_path, hm_run** out);
HM_API hm_status hm_run_parse(const char* json_text, const char* base_dir, hm_run** out);
HM_API void hm_run_free(hm_run* run);
HM_API hm_status hm_run_output_dir(const hm_run* run, char** out);
HM_API hm_status hm_run_checkpoint_path(const hm_run* run, char** out);

/* Commands. JSON results are returned through `out_json` when it is non-null. */
HM_API hm_status hm_gen_data(const hm_run* run, char** out_json);

typedef struct hm_train_options {
    const char* resume; /* checkpoint to continue from, or NULL */
    long until;         /* last round to run; < 0 runs to the configured total */
    int threads;        /* 0 keeps the configured value */
} hm_train_options;

HM_API hm_train_options hm_train_options_default(void);
HM_API hm_status hm_train(const hm_run* run, const hm_train_options* opts, char** out_json);

typedef struct hm_eval_options {
    const char* checkpoint; /* NULL: the run's checkpoint */
    const int* tasks;       /* NULL or n_tasks == 0: every trained task */
    size_t n_tasks;
    int episodes;           /* < 0: configured value */
    int has_seed;
    uint64_t seed;
} hm_eval_options;

HM_API hm_eval_options hm_eval_options_default(void);
HM_API hm_status hm_eval(const hm_run* run, const hm_eval_options* opts, char** out_json);

typedef struct hm_unseen_options {
    const char* checkpoint;
    int thresh; /* < 0: ceil(N / 2) */
    int random_control;
    int episodes;
    int has_seed;
    uint64_t seed;
} hm_unseen_options;

HM_API hm_unseen_options hm_unseen_options_default(void);
HM_API hm_status hm_eval_unseen(const hm_run* run, const hm_unseen_options* opts, char** out_json);

/* Writes masks_hamming.csv and masks_density.csv into out_dir (NULL: the
 * checkpoint's directory). */
HM_API hm_status hm_inspect_masks(const char* checkpoint, const char* out_dir, char** out_json);

/* Checkpoints */
HM_API hm_status hm_checkpoint_load(const char* path, hm_checkpoint** out);
HM_API void hm_checkpoint_free(hm_checkpoint* ckpt);
HM_API hm_status hm_checkpoint_round(const hm_checkpoint* ckpt, long* out);
HM_API hm_status hm_checkpoint_param_count(const hm_checkpoint* ckpt, size_t* out);
/* Writes up to `cap` ids; *n_out receives the total count. */
HM_API hm_status hm_checkpoint_task_ids(const hm_checkpoint* ckpt, int* ids, size_t cap, size_t* n_out);
HM_API hm_status hm_checkpoint_mask(const hm_checkpoint* ckpt, int task_id, uint8_t* bits, size_t cap);
HM_API hm_status hm_checkpoint_params(const hm_checkpoint* ckpt, double* values, size_t cap);

#ifdef __cplusplus
}
#endif

#endif /* HARMONY_H */
